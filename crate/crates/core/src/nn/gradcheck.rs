//! Central finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::{loss_and_grads, loss_only, PropagatedInput, Regularization, Targets};
use super::params::{MaskParams, ModelDims, ModelParams, TensorSet};
use crate::error::Result;
use crate::graph::{generate_er, Graph};

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

/// Denominator floor of the relative error, so that components whose true
/// value is near the finite-difference round-off scale (about
/// `ε·|L|/STEP`) are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTask {
    Nodes,
    Links,
}

/// A randomly drawn small training problem.
pub struct Instance {
    pub graph: Graph,
    pub input: PropagatedInput,
    pub params: ModelParams,
    pub masks: MaskParams,
    pub anchor: ModelParams,
    pub train_ids: Vec<usize>,
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

impl Instance {
    /// Graph with at most `max_nodes` nodes and hidden width at most
    /// `max_hidden`; mask entries are kept away from zero where `|μ|` has a kink.
    pub fn random(seed: u64, max_nodes: usize, max_hidden: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=max_nodes.max(3));
        let dims = ModelDims {
            input: rng.random_range(1..=4),
            hidden: rng.random_range(2..=max_hidden.max(2)),
            classes: rng.random_range(2..=3),
        };
        let base = generate_er(n, 0.45, dims.input, rng.random())?;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..dims.classes)).collect();
        let graph = Graph::new(
            n,
            base.edges().iter().copied(),
            base.features().clone(),
            labels,
            dims.classes,
        )?;
        let input = PropagatedInput::from_graph(&graph)?;

        let mut normal = |scale: f64| {
            let mut p = ModelParams::zeros(dims);
            for s in p.slices_mut() {
                s.iter_mut()
                    .for_each(|x| *x = scale * rng.sample::<f64, _>(StandardNormal));
            }
            p
        };
        let params = normal(0.8);
        let anchor = normal(0.8);
        let mut mask_values = ModelParams::zeros(dims);
        for s in mask_values.slices_mut() {
            for x in s.iter_mut() {
                let magnitude = rng.random_range(0.3..1.5);
                *x = if rng.random_bool(0.85) {
                    magnitude
                } else {
                    -magnitude
                };
            }
        }
        let masks = MaskParams::from_values(mask_values, true);

        let mut train_ids: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
        if train_ids.is_empty() {
            train_ids.push(0);
        }
        let mut positive = graph.edges().to_vec();
        if positive.is_empty() {
            positive.push((0, 1));
        }
        let negative = (0..positive.len())
            .map(|_| {
                let u = rng.random_range(0..n);
                let v = (u + rng.random_range(1..n)) % n;
                (u, v)
            })
            .collect();
        Ok(Instance {
            graph,
            input,
            params,
            masks,
            anchor,
            train_ids,
            positive,
            negative,
        })
    }

    pub fn targets(&self, task: CheckTask) -> Targets<'_> {
        match task {
            CheckTask::Nodes => Targets::Nodes {
                labels: self.graph.labels(),
                train_ids: &self.train_ids,
            },
            CheckTask::Links => Targets::Links {
                positive: &self.positive,
                negative: &self.negative,
            },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub instances: usize,
    pub components: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradcheckReport {
    fn record(&mut self, rel: f64, what: impl FnOnce() -> String) {
        self.components += 1;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = what();
        }
    }
}

/// Compares every analytic gradient entry (parameters and mask) against
/// central differences of the total loss.
pub fn check_instance(
    inst: &Instance,
    task: CheckTask,
    reg: Regularization,
    report: &mut GradcheckReport,
) -> Result<()> {
    let targets = inst.targets(task);
    let total = |p: &ModelParams, m: &MaskParams| -> Result<f64> {
        Ok(loss_only(p, Some(m), Some(&inst.anchor), &inst.input, &targets, reg)?.total)
    };
    let (_, grads) = loss_and_grads(
        &inst.params,
        Some(&inst.masks),
        Some(&inst.anchor),
        &inst.input,
        &targets,
        reg,
    )?;
    let mask_grads = grads.masks.expect("mask gradients requested");

    let analytic = grads.params.flatten();
    let mut probe = inst.params.clone();
    let mut k = 0;
    for t in 0..6 {
        for i in 0..probe.slices()[t].len() {
            let orig = probe.slices()[t][i];
            probe.slices_mut()[t][i] = orig + STEP;
            let up = total(&probe, &inst.masks)?;
            probe.slices_mut()[t][i] = orig - STEP;
            let down = total(&probe, &inst.masks)?;
            probe.slices_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            report.record(relative_error(analytic[k], numeric), || {
                format!(
                    "{task:?} param tensor {t} entry {i}: analytic {} numeric {numeric}",
                    analytic[k]
                )
            });
            k += 1;
        }
    }

    let analytic = mask_grads.flatten();
    let mut probe = inst.masks.clone();
    let mut k = 0;
    for t in 0..6 {
        for i in 0..probe.values().slices()[t].len() {
            let orig = probe.values().slices()[t][i];
            probe.values_mut().slices_mut()[t][i] = orig + STEP;
            let up = total(&inst.params, &probe)?;
            probe.values_mut().slices_mut()[t][i] = orig - STEP;
            let down = total(&inst.params, &probe)?;
            probe.values_mut().slices_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            report.record(relative_error(analytic[k], numeric), || {
                format!(
                    "{task:?} mask tensor {t} entry {i}: analytic {} numeric {numeric}",
                    analytic[k]
                )
            });
            k += 1;
        }
    }
    report.instances += 1;
    Ok(())
}

/// Runs `instances` random problems per task head.
pub fn run_suite(
    instances: usize,
    seed: u64,
    max_nodes: usize,
    max_hidden: usize,
    reg: Regularization,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for i in 0..instances {
        let inst = Instance::random(seed.wrapping_add(i as u64), max_nodes, max_hidden)?;
        check_instance(&inst, CheckTask::Nodes, reg, &mut report)?;
        check_instance(&inst, CheckTask::Links, reg, &mut report)?;
    }
    Ok(report)
}
