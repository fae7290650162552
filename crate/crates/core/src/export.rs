//! Text exports for external plotting: adjacency and correlation matrices,
//! edge lists, attention coefficients, metrics logs and loss surfaces.

use std::fmt::Write;

use crate::gat::LayerAttention;
use crate::graph::{adjacency_dense, PatchGraph};
use crate::tensor::Tensor;
use crate::train::MetricsReport;

pub const METRICS_HEADER: &str = "epoch,loss,macro_f1,micro_f1,lr,throughput";

/// A matrix as comma-separated rows, values in shortest round-trip form.
pub fn matrix_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Dense `|V|×|V|` weighted adjacency.
pub fn adjacency_csv(g: &PatchGraph) -> String {
    matrix_csv(&adjacency_dense(g))
}

/// `u`, `v`, `weight` per directed edge; weights to 9 significant digits.
pub fn edge_tsv(g: &PatchGraph) -> String {
    let mut out = String::from("u\tv\tweight\n");
    for e in &g.edges {
        writeln!(out, "{}\t{}\t{:.8e}", e.u, e.v, e.weight).unwrap();
    }
    out
}

/// One line per (layer, head, edge).
pub fn attention_tsv(layers: &[LayerAttention]) -> String {
    let mut out = String::from("layer\thead\tu\tv\talpha\n");
    for l in layers {
        for (h, alphas) in l.alphas.iter().enumerate() {
            for (&(u, v), a) in l.edges.iter().zip(alphas) {
                writeln!(out, "{}\t{h}\t{u}\t{v}\t{a}", l.layer).unwrap();
            }
        }
    }
    out
}

pub fn metrics_row(r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.epoch, r.loss, r.macro_f1, r.micro_f1, r.lr, r.throughput
    )
}
