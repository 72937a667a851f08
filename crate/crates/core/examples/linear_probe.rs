//! Fits the logistic probe on two Gaussian blobs, then on the same points
//! with shuffled labels, and round-trips the fitted probe through disk.
//!
//! ```bash
//! cargo run --release --example linear_probe
//! ```

use conflict_probe::probe::{fit_linear_probe, ProbeDataset, ProbeModel, ProbeOptions, RowMeta};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn accuracy(probe: &ProbeModel, ds: &ProbeDataset) -> anyhow::Result<f64> {
    let predicted = probe.predict_rows(&ds.features)?;
    let hits = predicted.iter().zip(&ds.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / ds.len() as f64)
}

fn main() -> anyhow::Result<()> {
    let (n, dim) = (400, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 1.0)?;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 2) as u8;
        let shift = if y == 1 { 1.5 } else { -1.5 };
        for j in 0..dim {
            features[[i, j]] = noise.sample(&mut rng) + if j < 4 { shift } else { 0.0 };
        }
        labels.push(y);
        rows.push(RowMeta {
            example_id: i as u32,
            group: "blobs".into(),
            subject: format!("s{i}"),
            pk_object: String::new(),
            counter_object: String::new(),
        });
    }
    let ds = ProbeDataset::new(features, labels, rows)?;
    let opts = ProbeOptions::default();

    let (probe, losses) = fit_linear_probe(&ds, &opts)?;
    println!(
        "separable: {} iterations, loss {:.4} -> {:.4}, accuracy {:.3}",
        probe.iterations,
        losses[0],
        probe.final_loss,
        accuracy(&probe, &ds)?
    );

    let mut shuffled = ds.labels.clone();
    shuffled.shuffle(&mut rng);
    let null = ds.with_labels(shuffled)?;
    let (null_probe, _) = fit_linear_probe(&null, &opts)?;
    println!(
        "shuffled labels: training accuracy {:.3}, accuracy on the true labels {:.3}",
        accuracy(&null_probe, &null)?,
        accuracy(&null_probe, &ds)?
    );

    let dir = tempfile::tempdir()?;
    probe.save(dir.path(), None, &opts, ds.len())?;
    let (loaded, _) = ProbeModel::load(dir.path())?;
    let same = ds
        .features
        .rows()
        .into_iter()
        .all(|r| probe.decision(r).ok() == loaded.decision(r).ok());
    println!("reloaded probe gives identical decisions: {same}");
    Ok(())
}
