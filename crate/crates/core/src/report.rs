//! Post-hoc analyses of a finished run: similarity heatmaps, label
//! similarity, neighbor cross-evaluation, mask overlap and communication.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::config::{RunManifest, StrategyKind, TaskKind};
use crate::error::{Error, Result};
use crate::fl::{
    read_metrics, Checkpoint, ClientData, Experiment, RoundRecord, CHECKPOINT_DIR, MANIFEST_FILE,
    METRICS_FILE, REPORT_DIR, SIMILARITY_DIR,
};
use crate::nn::{apply_mask_threshold, MaskParams, ModelParams, TensorSet};
use crate::partition::{js_divergence, label_distribution, missing_edges, Partition};

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|x| x.to_string()))
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let bad = |e: String| Error::Format(format!("{}: {e}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(
            rec.iter()
                .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<_>>()?,
        );
    }
    let k = rows.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(bad("matrix is not square".into()));
    }
    Array2::from_shape_vec((k, k), rows.concat()).map_err(|e| bad(e.to_string()))
}

/// Plain-text grayscale image, one pixel per entry, min-max scaled to 0..255.
pub fn write_pgm(path: &Path, m: &Array2<f64>) -> Result<()> {
    let (min, max) = m
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let span = max - min;
    let mut out = String::new();
    let _ = writeln!(out, "P2");
    let _ = writeln!(
        out,
        "# min-max normalized: pixel = round(255 * (value - {min}) / ({max} - {min})); raw values in the csv"
    );
    let _ = writeln!(out, "{} {}", m.ncols(), m.nrows());
    let _ = writeln!(out, "255");
    for row in m.rows() {
        let px: Vec<String> = row
            .iter()
            .map(|&x| {
                let v = if span > 0.0 {
                    (255.0 * (x - min) / span).round()
                } else {
                    0.0
                };
                (v as u8).to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", px.join(" "));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `1 − JS(p_i, p_j)` between client label distributions.
pub fn label_similarity(
    p: &Partition,
    labels: &[usize],
    num_classes: usize,
) -> Result<Array2<f64>> {
    if p.num_clients() < 2 {
        return Err(Error::param("label similarity needs at least two clients"));
    }
    let dists: Vec<Vec<f64>> = p
        .clients
        .iter()
        .map(|c| label_distribution(labels, c, num_classes))
        .collect();
    let k = dists.len();
    Ok(Array2::from_shape_fn((k, k), |(i, j)| {
        if i == j {
            1.0
        } else {
            1.0 - js_divergence(&dists[i], &dists[j])
        }
    }))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn upper_triangle(m: &Array2<f64>) -> Vec<f64> {
    let k = m.nrows();
    (0..k)
        .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
        .map(|(i, j)| m[[i, j]])
        .collect()
}

/// Pearson correlation over the strictly upper triangles; `Ok(None)` when
/// it is undefined because one side is constant.
pub fn similarity_label_correlation(s: &Array2<f64>, l: &Array2<f64>) -> Result<Option<f64>> {
    if s.dim() != l.dim() || s.nrows() != s.ncols() {
        return Err(Error::param(format!(
            "matrices of shape {:?} and {:?}",
            s.dim(),
            l.dim()
        )));
    }
    if s.nrows() < 3 {
        return Err(Error::param("correlation needs at least three clients"));
    }
    Ok(pearson(&upper_triangle(s), &upper_triangle(l)))
}

/// Fraction of positions whose mask survives the threshold in both masks.
pub fn mask_overlap(a: &MaskParams, b: &MaskParams, threshold: f64) -> Result<f64> {
    if !a.values().same_shape(b.values()) {
        return Err(Error::param("masks have different shapes"));
    }
    let alive = |m: f64| !(m.abs() < threshold || m == 0.0);
    let (mut both, mut total) = (0usize, 0usize);
    for (sa, sb) in a.values().slices().into_iter().zip(b.values().slices()) {
        for (&x, &y) in sa.iter().zip(sb) {
            total += 1;
            both += usize::from(alive(x) && alive(y));
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        both as f64 / total as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborEntry {
    pub client_id: usize,
    /// Client sharing the most missing edges; `None` when there are none.
    pub neighbor_id: Option<usize>,
    pub local_acc: f64,
    pub neighbor_acc: Option<f64>,
}

fn test_accuracy(data: &ClientData, model: &ModelParams) -> Result<f64> {
    Ok(data.evaluate(model, None, 0)?[2])
}

/// Scores each client's model on the test split of the client it shares
/// the most missing edges with (lowest index on ties).
///
/// `models` are the evaluation-ready (already masked) parameters.
pub fn neighbor_evaluation(
    clients: &[ClientData],
    models: &[ModelParams],
    missing: &Array2<u64>,
) -> Result<Vec<NeighborEntry>> {
    let k = clients.len();
    if k < 2 || models.len() != k || missing.dim() != (k, k) {
        return Err(Error::param(
            "neighbor evaluation needs two or more clients with one model each",
        ));
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut best: Option<usize> = None;
        for j in (0..k).filter(|&j| j != i) {
            if missing[[i, j]] > 0 && best.is_none_or(|b| missing[[i, j]] > missing[[i, b]]) {
                best = Some(j);
            }
        }
        let local_acc = test_accuracy(&clients[i], &models[i])?;
        let neighbor_acc = match best {
            Some(j) => Some(test_accuracy(&clients[j], &models[i])?),
            None => {
                log::info!("client {i} has no missing edges; neighbor evaluation skipped");
                None
            }
        };
        out.push(NeighborEntry {
            client_id: i,
            neighbor_id: best,
            local_acc,
            neighbor_acc,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommRow {
    pub strategy: StrategyKind,
    pub params_sent: u64,
    pub params_received: u64,
    pub total: u64,
    /// Percent of the dense FedAvg volume for the same rounds and clients.
    pub relative_cost: Option<f64>,
    pub mean_sparsity: f64,
}

/// Per-strategy transmission totals.
///
/// The FedAvg reference is taken from FedAvg rows when present, otherwise
/// from `dense_params` (FedAvg sends and receives every parameter once per
/// client and round).
pub fn communication_summary(
    records: &[RoundRecord],
    dense_params: Option<usize>,
) -> Result<Vec<CommRow>> {
    if records.is_empty() {
        return Err(Error::param("no metrics rows to summarize"));
    }
    let mut groups: BTreeMap<&str, Vec<&RoundRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.strategy.as_str()).or_default().push(r);
    }
    let totals = |rows: &[&RoundRecord]| -> (u64, u64) {
        rows.iter().fold((0, 0), |(s, r), x| {
            (s + x.params_sent as u64, r + x.params_received as u64)
        })
    };
    let fedavg_total = groups.get("fedavg").map(|rows| {
        let (s, r) = totals(rows);
        (s + r) as f64
    });
    Ok(groups
        .values()
        .map(|rows| {
            let (sent, received) = totals(rows);
            let total = sent + received;
            let reference =
                fedavg_total.or(dense_params.map(|p| 2.0 * p as f64 * rows.len() as f64));
            CommRow {
                strategy: rows[0].strategy,
                params_sent: sent,
                params_received: received,
                total,
                relative_cost: reference
                    .filter(|&x| x > 0.0)
                    .map(|x| 100.0 * total as f64 / x),
                mean_sparsity: rows.iter().map(|r| r.sparsity).sum::<f64>() / rows.len() as f64,
            }
        })
        .collect())
}

/// Files written by [`report`].
#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub dir: PathBuf,
    pub snapshot_rounds: Vec<usize>,
    pub correlations: BTreeMap<usize, Option<f64>>,
    pub comm: Vec<CommRow>,
    pub neighbors: Vec<NeighborEntry>,
}

fn write_serialized<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn snapshot_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(found),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let round = path.file_name().and_then(|n| n.to_str()).and_then(|n| {
            n.strip_prefix("round_")?
                .strip_suffix(".csv")?
                .parse::<usize>()
                .ok()
        });
        if let Some(r) = round {
            found.push((r, path));
        }
    }
    found.sort();
    Ok(found)
}

/// Evaluation-ready models from the final checkpoints, if present.
fn final_models(run_dir: &Path, exp: &Experiment) -> Result<Option<Vec<ModelParams>>> {
    let dir = run_dir.join(CHECKPOINT_DIR).join("final");
    let cfg = &exp.config;
    let threshold = cfg.training.mask_threshold;
    if cfg.strategy.kind == StrategyKind::Oracle || !dir.exists() {
        return Ok(None);
    }
    let mut models = Vec::with_capacity(exp.clients.len());
    for c in &exp.clients {
        let ckpt = Checkpoint::read(&dir.join(format!("client_{}.json", c.id)))?;
        let params = ckpt.params(exp.dims)?;
        let model = match ckpt.masks(exp.dims, cfg.model.mask_classifier)? {
            Some(m) => apply_mask_threshold(&params, &m, threshold)?.0,
            None => params,
        };
        models.push(model);
    }
    Ok(Some(models))
}

/// Runs every analysis over a run directory and writes `report/`.
pub fn report(run_dir: &Path) -> Result<ReportSummary> {
    let manifest = RunManifest::read(&run_dir.join(MANIFEST_FILE))?;
    let records = read_metrics(&run_dir.join(METRICS_FILE))?;
    let exp = Experiment::prepare(&manifest.config)?;
    let out = run_dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let k = exp.partition.num_clients();
    let labels = if k >= 2 {
        let l = label_similarity(&exp.partition, exp.graph.labels(), exp.graph.num_classes())?;
        write_matrix_csv(&out.join("label_similarity.csv"), &l)?;
        Some(l)
    } else {
        None
    };

    let mut correlations = BTreeMap::new();
    let mut rounds = Vec::new();
    let mut corr_text = String::new();
    for (round, path) in snapshot_files(&run_dir.join(SIMILARITY_DIR))? {
        let s = read_matrix_csv(&path)?;
        let base = out.join(format!("similarity_round_{round}"));
        write_matrix_csv(&base.with_extension("csv"), &s)?;
        write_pgm(&base.with_extension("pgm"), &s)?;
        rounds.push(round);
        if let Some(l) = labels.as_ref().filter(|l| l.dim() == s.dim() && k >= 3) {
            let c = similarity_label_correlation(&s, l)?;
            match c {
                Some(v) => {
                    let _ = writeln!(corr_text, "round {round}: {v}");
                }
                None => {
                    let _ = writeln!(
                        corr_text,
                        "round {round}: undefined (constant similarities)"
                    );
                }
            }
            correlations.insert(round, c);
        }
    }
    if corr_text.is_empty() {
        corr_text.push_str("no similarity snapshots with three or more clients\n");
    }
    std::fs::write(out.join("correlation.txt"), corr_text)
        .map_err(|e| Error::io(out.join("correlation.txt"), e))?;

    let comm = if records.is_empty() {
        Vec::new()
    } else {
        communication_summary(&records, Some(exp.dims.num_params()))?
    };
    write_serialized(&out.join("comm_summary.csv"), &comm)?;

    let mut neighbors = Vec::new();
    if exp.config.task == TaskKind::NodeClf && k >= 2 {
        if let Some(models) = final_models(run_dir, &exp)? {
            let missing = missing_edges(&exp.graph, &exp.partition);
            neighbors = neighbor_evaluation(&exp.clients, &models, &missing)?;
        }
    }
    write_serialized(&out.join("neighbor_report.csv"), &neighbors)?;

    Ok(ReportSummary {
        dir: out,
        snapshot_rounds: rounds,
        correlations,
        comm,
        neighbors,
    })
}
