//! Pooled success rate with weighted standard error, and the Mann-Whitney U
//! test in its exact and normal-approximation forms.
//!
//! ```bash
//! cargo run --example statistics
//! ```

use conflict_probe::eval::{aggregate, mann_whitney_u_with, GroupResult, Method};

fn main() -> anyhow::Result<()> {
    let groups = vec![
        GroupResult::new("religion", 0.8, 100)?,
        GroupResult::new("media", 0.6, 300)?,
        GroupResult::new("geography", 0.7, 50)?,
    ];
    for g in &groups {
        println!("{:<10} n={:<4} p={:.3} se={:.4}", g.group_id, g.n, g.p, g.se);
    }
    let agg = aggregate(&groups)?;
    println!(
        "pooled P={:.4} WSE={:.4} 95% CI [{:.4}, {:.4}]\n",
        agg.p, agg.wse, agg.ci_low, agg.ci_high
    );

    let pk = [12.0, 40.0, 33.0, 51.0, 27.0, 64.0, 45.0, 38.0];
    let ck = [8.0, 15.0, 22.0, 31.0, 9.0, 26.0, 17.0, 30.0];
    for method in [Method::Exact, Method::Normal] {
        let r = mann_whitney_u_with(&pk, &ck, method)?;
        println!(
            "{method:?}: U={} p(PK > CK)={:.5} p(PK < CK)={:.5}",
            r.u_a, r.p_greater, r.p_less
        );
    }
    Ok(())
}
