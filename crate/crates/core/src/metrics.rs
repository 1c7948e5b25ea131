//! Metric records and sinks.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Every metric name a record may carry.
pub const METRIC_NAMES: &[&str] = &[
    "loss.translation",
    "loss.denoising",
    "loss.backtranslation",
    "loss.adv1",
    "loss.adv2",
    "loss.adv",
    "loss.generator",
    "loss.critic",
    "adv.generator_step",
    "lr",
    "bleu.dev",
    "bleu.test",
    "bleu",
    "probe.accuracy",
    "probe.wasserstein_gap",
    "purity",
    "bt.pairs",
    "bt.dropped",
    "finetune.skipped",
    "size",
];

pub fn is_registered(name: &str) -> bool {
    METRIC_NAMES.contains(&name)
}

/// Named scalars for one step of one run. Wall-clock time is attached by
/// the sink that persists the record.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run: String,
    pub step: u64,
    pub values: Vec<(String, f64)>,
}

impl MetricsRecord {
    pub fn new(run: impl Into<String>, step: u64) -> Self {
        Self {
            run: run.into(),
            step,
            values: Vec::new(),
        }
    }

    /// Adds a value. Panics on names outside [`METRIC_NAMES`].
    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.push(name, value);
        self
    }

    pub fn push(&mut self, name: &str, value: f64) {
        assert!(is_registered(name), "unregistered metric {name}");
        self.values.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub trait MetricsSink {
    fn record(&mut self, record: MetricsRecord);
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: MetricsRecord) {
        self.push(record);
    }
}

/// Discards everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: MetricsRecord) {}
}

impl<S: MetricsSink + ?Sized> MetricsSink for &mut S {
    fn record(&mut self, record: MetricsRecord) {
        (**self).record(record);
    }
}
