//! CSV renderings of reports. Column sets are versioned by
//! [`REPORT_FORMAT_VERSION`] and only ever change together with it.

use super::{ComparisonReport, SensitivityReport};
use crate::graph::{FlopReport, ReductionReport};
use crate::train::History;

pub const REPORT_FORMAT_VERSION: u32 = 1;

pub const SENSITIVITY_HEADER: [&str; 7] = [
    "layer",
    "ratio",
    "filters_pruned",
    "filters_total",
    "filters_pruned_pct",
    "accuracy",
    "accuracy_retrained",
];
pub const COMPARISON_HEADER: [&str; 7] = [
    "criterion",
    "layer",
    "ratio",
    "filters_pruned",
    "filters_total",
    "filters_pruned_pct",
    "accuracy",
];
pub const HISTORY_HEADER: [&str; 5] = ["epoch", "lr", "train_loss", "train_accuracy", "val_accuracy"];
pub const FLOP_HEADER: [&str; 7] = ["layer", "kind", "out_channels", "out_height", "out_width", "flops", "params"];
pub const REDUCTION_HEADER: [&str; 7] = [
    "layer",
    "baseline_flops",
    "pruned_flops",
    "flops_reduction_pct",
    "baseline_params",
    "pruned_params",
    "params_reduction_pct",
];

fn render<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn pct(part: usize, whole: usize) -> String {
    if whole == 0 {
        "0".into()
    } else {
        (100.0 * part as f64 / whole as f64).to_string()
    }
}

pub fn sensitivity_csv(report: &SensitivityReport) -> String {
    render(
        SENSITIVITY_HEADER,
        report.rows.iter().map(|r| {
            [
                r.layer.clone(),
                r.ratio.to_string(),
                r.filters_pruned.to_string(),
                r.filters_total.to_string(),
                pct(r.filters_pruned, r.filters_total),
                r.accuracy.to_string(),
                r.accuracy_retrained.map(|a| a.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

pub fn comparison_csv(report: &ComparisonReport) -> String {
    render(
        COMPARISON_HEADER,
        report.rows.iter().map(|r| {
            [
                r.criterion.clone(),
                r.layer.clone(),
                r.ratio.to_string(),
                r.filters_pruned.to_string(),
                r.filters_total.to_string(),
                pct(r.filters_pruned, r.filters_total),
                r.accuracy.to_string(),
            ]
        }),
    )
}

pub fn history_csv(history: &History) -> String {
    render(
        HISTORY_HEADER,
        history.epochs.iter().map(|e| {
            [
                e.epoch.to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
                e.train_accuracy.to_string(),
                e.val_accuracy.to_string(),
            ]
        }),
    )
}

/// Per-layer rows followed by a `total` row.
pub fn flop_csv(report: &FlopReport) -> String {
    let total = [
        "total".to_string(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        report.total_flops.to_string(),
        report.total_params.to_string(),
    ];
    render(
        FLOP_HEADER,
        report
            .rows
            .iter()
            .map(|r| {
                [
                    r.layer.clone(),
                    r.kind.to_string(),
                    r.out_channels.to_string(),
                    r.out_spatial.0.to_string(),
                    r.out_spatial.1.to_string(),
                    r.flops.to_string(),
                    r.params.to_string(),
                ]
            })
            .chain(std::iter::once(total)),
    )
}

/// Per-layer rows followed by a `total` row; reductions in percent.
pub fn reduction_csv(report: &ReductionReport, baseline: &FlopReport, pruned: &FlopReport) -> String {
    let total = [
        "total".to_string(),
        baseline.total_flops.to_string(),
        pruned.total_flops.to_string(),
        (100.0 * report.total_flops_reduction).to_string(),
        baseline.total_params.to_string(),
        pruned.total_params.to_string(),
        (100.0 * report.total_params_reduction).to_string(),
    ];
    render(
        REDUCTION_HEADER,
        report
            .rows
            .iter()
            .map(|r| {
                [
                    r.layer.clone(),
                    r.baseline_flops.to_string(),
                    r.pruned_flops.to_string(),
                    (100.0 * r.flops_reduction).to_string(),
                    r.baseline_params.to_string(),
                    r.pruned_params.to_string(),
                    (100.0 * r.params_reduction).to_string(),
                ]
            })
            .chain(std::iter::once(total)),
    )
}
