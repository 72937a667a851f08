//! Tables and figures: label counts, per-address success-rate CSV, and an
//! SVG of success rate against layer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::{ModuleKind, TokenRole};
use crate::eval::{AddressResult, SweepRow, Z_95};
use crate::pipeline::{Label, LabeledExample};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub ck: usize,
    pub pk: usize,
    pub nd: usize,
}

impl LabelCounts {
    pub fn add(&mut self, label: Label) {
        match label {
            Label::CK => self.ck += 1,
            Label::PK => self.pk += 1,
            Label::ND => self.nd += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.ck + self.pk + self.nd
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationCounts {
    pub relation: String,
    pub group: String,
    pub counts: LabelCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub relations: Vec<RelationCounts>,
    pub overall: LabelCounts,
}

pub fn label_summary(examples: &[LabeledExample]) -> LabelSummary {
    let mut per: BTreeMap<&str, (&str, LabelCounts)> = BTreeMap::new();
    let mut overall = LabelCounts::default();
    for e in examples {
        per.entry(&e.prompt.counter.relation)
            .or_insert((&e.group, LabelCounts::default()))
            .1
            .add(e.label);
        overall.add(e.label);
    }
    LabelSummary {
        relations: per
            .into_iter()
            .map(|(relation, (group, counts))| RelationCounts {
                relation: relation.to_string(),
                group: group.to_string(),
                counts,
            })
            .collect(),
        overall,
    }
}

impl LabelSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("relation,group,CK,PK,ND\n");
        for r in &self.relations {
            let c = r.counts;
            let _ = writeln!(out, "{},{},{},{},{}", r.relation, r.group, c.ck, c.pk, c.nd);
        }
        let c = self.overall;
        let _ = writeln!(out, "all,all,{},{},{}", c.ck, c.pk, c.nd);
        out
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let width = self
            .relations
            .iter()
            .map(|r| r.relation.len())
            .max()
            .unwrap_or(0)
            .max(8);
        let mut out = format!("{:<width$}  {:>6} {:>6} {:>6}\n", "relation", "CK", "PK", "ND");
        for r in &self.relations {
            let c = r.counts;
            let _ = writeln!(out, "{:<width$}  {:>6} {:>6} {:>6}", r.relation, c.ck, c.pk, c.nd);
        }
        let c = self.overall;
        let _ = writeln!(out, "{:<width$}  {:>6} {:>6} {:>6}", "all", c.ck, c.pk, c.nd);
        out
    }
}

pub fn results_csv(results: &[AddressResult]) -> String {
    let mut out = String::from("layer,module,role,P,WSE,ci_low,ci_high,groups\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.layer,
            r.module.label(),
            r.role,
            r.p,
            r.wse,
            r.ci[0],
            r.ci[1],
            r.groups.len()
        );
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("layer,module,role,mean,std,rates\n");
    for r in rows {
        let rates: Vec<String> = r.rates.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            r.layer,
            r.module.label(),
            r.role,
            r.mean,
            r.std,
            rates.join(" ")
        );
    }
    out
}

fn role_color(role: TokenRole) -> &'static str {
    match role {
        TokenRole::Object => "#1f77b4",
        TokenRole::SubjectQ => "#2ca02c",
        TokenRole::RelationQ => "#d62728",
        TokenRole::First => "#7f7f7f",
    }
}

fn role_title(role: TokenRole) -> &'static str {
    match role {
        TokenRole::Object => "object",
        TokenRole::SubjectQ => "subject (query)",
        TokenRole::RelationQ => "relation (query)",
        TokenRole::First => "first token",
    }
}

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN_L: f64 = 50.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 40.0;
const GAP: f64 = 30.0;

/// Success rate against layer: one panel per module, one line per token
/// role, a shaded band of ±1.96·WSE, and a dashed chance line.
pub fn results_svg(results: &[AddressResult]) -> String {
    let modules: Vec<ModuleKind> = ModuleKind::ALL
        .into_iter()
        .filter(|m| results.iter().any(|r| r.module == *m))
        .collect();
    let max_layer = results.iter().map(|r| r.layer).max().unwrap_or(0);
    let width = MARGIN_L + modules.len().max(1) as f64 * (PANEL_W + GAP) + 120.0;
    let height = MARGIN_T + PANEL_H + MARGIN_B;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for (pi, &module) in modules.iter().enumerate() {
        let x0 = MARGIN_L + pi as f64 * (PANEL_W + GAP);
        let y0 = MARGIN_T;
        let sx = |layer: f64| {
            if max_layer == 0 {
                x0 + PANEL_W / 2.0
            } else {
                x0 + layer / max_layer as f64 * PANEL_W
            }
        };
        let sy = |p: f64| y0 + (1.0 - p.clamp(0.0, 1.0)) * PANEL_H;

        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 - 14.0,
            module.label()
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL_W:.1}" height="{PANEL_H:.1}" fill="none" stroke="#333"/>"##
        );
        for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let y = sy(tick);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{x0:.1}" y2="{y:.1}" stroke="#333"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.2}</text>"##,
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0
            );
        }
        for layer in 0..=max_layer {
            let x = sx(layer as f64);
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{layer}</text>"##,
                y0 + PANEL_H,
                y0 + PANEL_H + 4.0,
                y0 + PANEL_H + 16.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">layer</text>"#,
            x0 + PANEL_W / 2.0,
            y0 + PANEL_H + 32.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{x0:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
            sy(0.5),
            x0 + PANEL_W,
            sy(0.5)
        );

        for role in TokenRole::ALL {
            let mut pts: Vec<&AddressResult> = results
                .iter()
                .filter(|r| r.module == module && r.role == role)
                .collect();
            if pts.is_empty() {
                continue;
            }
            pts.sort_by_key(|r| r.layer);
            let color = role_color(role);
            let upper: Vec<String> = pts
                .iter()
                .map(|r| format!("{:.1},{:.1}", sx(r.layer as f64), sy(r.p + Z_95 * r.wse)))
                .collect();
            let lower: Vec<String> = pts
                .iter()
                .rev()
                .map(|r| format!("{:.1},{:.1}", sx(r.layer as f64), sy(r.p - Z_95 * r.wse)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
            let line: Vec<String> = pts
                .iter()
                .map(|r| format!("{:.1},{:.1}", sx(r.layer as f64), sy(r.p)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
    }

    let lx = MARGIN_L + modules.len().max(1) as f64 * (PANEL_W + GAP);
    for (i, role) in TokenRole::ALL.into_iter().enumerate() {
        let y = MARGIN_T + 10.0 + i as f64 * 18.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            role_color(role),
            lx + 24.0,
            y + 4.0,
            role_title(role)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
