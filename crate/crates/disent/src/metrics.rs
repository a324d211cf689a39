//! Disentanglement scoring: the fixed-factor majority-vote metric (FVM),
//! the mutual information gap (MIG), and reconstruction-quality statistics.
//! All metrics consume pairings of latent codes (encoder posterior means)
//! with ground-truth factor labels.

use std::path::Path;

use crate::dsprites::{
    factor_to_index, index_to_factor, render, Dataset, DatasetView, FactorTuple, FACTOR_NAMES,
    IMAGE_PIXELS, IMAGE_SIDE, NUM_FACTORS,
};
use crate::error::{Error, Result};
use crate::models::{Encoder, VaeModel};
use crate::tensor::rng::SeededRng;
use crate::tensor::Tensor;

/// Upper bound on how many view points are encoded to estimate per-latent
/// standard deviations; larger views are subsampled with the metric seed.
const STD_SAMPLE_CAP: usize = 10_000;
/// Latents with empirical std below this are treated as inert and never win
/// the argmin-variance vote.
const INERT_STD: f32 = 1e-6;

pub const DEFAULT_FVM_VOTES: usize = 800;
pub const DEFAULT_FVM_SAMPLES_PER_VOTE: usize = 100;
pub const DEFAULT_MIG_BINS: usize = 20;

/// Anything that can map factor tuples to latent codes. The production
/// implementation renders the sprites and takes encoder posterior means;
/// tests substitute synthetic mappings.
pub trait CodeSource {
    fn code_dim(&self) -> usize;
    fn codes_for(&self, factors: &[FactorTuple]) -> Result<Vec<Vec<f32>>>;
}

/// Posterior-mean codes from a trained encoder, rendering each factor tuple
/// on demand.
pub struct EncoderCodes<'a> {
    pub encoder: &'a Encoder,
}

impl CodeSource for EncoderCodes<'_> {
    fn code_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    fn codes_for(&self, factors: &[FactorTuple]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(factors.len());
        for chunk in factors.chunks(128) {
            let mut data = Vec::with_capacity(chunk.len() * IMAGE_PIXELS);
            for f in chunk {
                data.extend_from_slice(&render(f)?.pixels);
            }
            let x = Tensor::new(vec![chunk.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
            let (mu, _) = self.encoder.encode(&x)?;
            let d = self.code_dim();
            for row in 0..chunk.len() {
                out.push(mu.data()[row * d..(row + 1) * d].to_vec());
            }
        }
        Ok(out)
    }
}

/// Code/factor pairing consumed by MIG and exportable as CSV.
#[derive(Debug, Clone)]
pub struct RepresentationTable {
    pub code_dim: usize,
    pub codes: Vec<Vec<f32>>,
    pub factors: Vec<FactorTuple>,
}

impl RepresentationTable {
    pub fn new(code_dim: usize) -> RepresentationTable {
        RepresentationTable {
            code_dim,
            codes: Vec::new(),
            factors: Vec::new(),
        }
    }

    pub fn push(&mut self, code: Vec<f32>, factors: FactorTuple) -> Result<()> {
        if code.len() != self.code_dim {
            return Err(Error::Metric(format!(
                "code length {} does not match table code_dim {}",
                code.len(),
                self.code_dim
            )));
        }
        factors.validate()?;
        self.codes.push(code);
        self.factors.push(factors);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Builds the table for every point of a view, in view order.
    pub fn from_source(source: &dyn CodeSource, view: &DatasetView) -> Result<RepresentationTable> {
        let factors: Vec<FactorTuple> = view
            .indices
            .iter()
            .map(|&i| index_to_factor(i as usize))
            .collect::<Result<_>>()?;
        let codes = source.codes_for(&factors)?;
        Ok(RepresentationTable {
            code_dim: source.code_dim(),
            codes,
            factors,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for d in 0..self.code_dim {
            out.push_str(&format!("code_{d},"));
        }
        out.push_str(&FACTOR_NAMES.join(","));
        out.push('\n');
        for (code, f) in self.codes.iter().zip(&self.factors) {
            for v in code {
                out.push_str(&format!("{v},"));
            }
            let l = f.labels();
            out.push_str(&format!("{},{},{},{},{}\n", l[0], l[1], l[2], l[3], l[4]));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<RepresentationTable> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Metric("empty representation CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < NUM_FACTORS + 1 || cols[cols.len() - NUM_FACTORS..] != FACTOR_NAMES {
            return Err(Error::Metric(format!(
                "unexpected representation CSV header: {header}"
            )));
        }
        let code_dim = cols.len() - NUM_FACTORS;
        let mut table = RepresentationTable::new(code_dim);
        for (li, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != cols.len() {
                return Err(Error::Metric(format!("bad CSV row {}: {line}", li + 2)));
            }
            let code: Vec<f32> = parts[..code_dim]
                .iter()
                .map(|s| s.parse().map_err(|_| Error::Metric(format!("bad code value {s}"))))
                .collect::<Result<_>>()?;
            let lab: Vec<usize> = parts[code_dim..]
                .iter()
                .map(|s| s.parse().map_err(|_| Error::Metric(format!("bad label {s}"))))
                .collect::<Result<_>>()?;
            table.push(code, FactorTuple::new(lab[0], lab[1], lab[2], lab[3], lab[4])?)?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone)]
pub struct FvmParams {
    pub num_votes: usize,
    pub samples_per_vote: usize,
    pub seed: u64,
}

impl Default for FvmParams {
    fn default() -> Self {
        FvmParams {
            num_votes: DEFAULT_FVM_VOTES,
            samples_per_vote: DEFAULT_FVM_SAMPLES_PER_VOTE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FvmReport {
    pub accuracy: f64,
    /// One (fixed_factor, argmin_latent) pair per vote, in vote order.
    pub votes: Vec<(usize, usize)>,
    /// Factors with fewer than two values in the view, left unscored.
    pub excluded_factors: Vec<usize>,
}

fn view_factor_values(view: &DatasetView) -> Result<[Vec<usize>; 5]> {
    let mut seen: [Vec<usize>; 5] = Default::default();
    for &i in &view.indices {
        let f = index_to_factor(i as usize)?;
        for (k, v) in f.labels().iter().enumerate() {
            if !seen[k].contains(v) {
                seen[k].push(*v);
            }
        }
    }
    for s in seen.iter_mut() {
        s.sort_unstable();
    }
    Ok(seen)
}

fn sample_tuple(values: &[Vec<usize>; 5], rng: &mut SeededRng) -> Result<FactorTuple> {
    let pick = |vals: &Vec<usize>, rng: &mut SeededRng| vals[rng.below(vals.len())];
    FactorTuple::new(
        pick(&values[0], rng),
        pick(&values[1], rng),
        pick(&values[2], rng),
        pick(&values[3], rng),
        pick(&values[4], rng),
    )
}

/// Majority-vote disentanglement metric. Each vote fixes one factor, varies
/// the rest, and identifies the latent whose std-normalized variance over
/// the vote batch is smallest; a latent's majority factor scores the votes.
pub fn fvm(source: &dyn CodeSource, view: &DatasetView, params: &FvmParams) -> Result<FvmReport> {
    if params.num_votes == 0 || params.samples_per_vote < 2 {
        return Err(Error::Metric(
            "fvm needs num_votes >= 1 and samples_per_vote >= 2".into(),
        ));
    }
    let values = view_factor_values(view)?;
    let usable: Vec<usize> = (0..NUM_FACTORS).filter(|&k| values[k].len() >= 2).collect();
    let excluded: Vec<usize> = (0..NUM_FACTORS).filter(|&k| values[k].len() < 2).collect();
    if usable.is_empty() {
        return Err(Error::Metric(
            "every factor is single-valued in this view; no votes possible".into(),
        ));
    }
    for &k in &excluded {
        log::warn!("fvm: factor {} is single-valued, excluded", FACTOR_NAMES[k]);
    }
    let dim = source.code_dim();
    let mut rng = SeededRng::new(params.seed);

    // per-latent std over the view (subsampled above the cap)
    let std = {
        let mut idx: Vec<u32> = view.indices.clone();
        if idx.len() > STD_SAMPLE_CAP {
            rng.shuffle(&mut idx);
            idx.truncate(STD_SAMPLE_CAP);
        }
        let factors: Vec<FactorTuple> = idx
            .iter()
            .map(|&i| index_to_factor(i as usize))
            .collect::<Result<_>>()?;
        let codes = source.codes_for(&factors)?;
        column_stds(&codes, dim)
    };

    let mut votes = Vec::with_capacity(params.num_votes);
    let mut counts = vec![vec![0usize; NUM_FACTORS]; dim];
    for _ in 0..params.num_votes {
        let k = usable[rng.below(usable.len())];
        let fixed = values[k][rng.below(values[k].len())];
        let mut factors = Vec::with_capacity(params.samples_per_vote);
        for _ in 0..params.samples_per_vote {
            let mut f = sample_tuple(&values, &mut rng)?;
            f.set_label(k, fixed)?;
            factors.push(f);
        }
        let codes = source.codes_for(&factors)?;
        let var = column_vars(&codes, dim);
        let mut best = 0usize;
        let mut best_v = f64::INFINITY;
        for j in 0..dim {
            if std[j] < INERT_STD {
                continue;
            }
            let nv = var[j] / (std[j] as f64 * std[j] as f64);
            if nv < best_v {
                best_v = nv;
                best = j;
            }
        }
        if best_v.is_infinite() {
            return Err(Error::Metric("every latent is constant over the view".into()));
        }
        counts[best][k] += 1;
        votes.push((k, best));
    }
    let correct: usize = counts.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum();
    Ok(FvmReport {
        accuracy: correct as f64 / params.num_votes as f64,
        votes,
        excluded_factors: excluded,
    })
}

fn column_stds(codes: &[Vec<f32>], dim: usize) -> Vec<f32> {
    column_vars(codes, dim).iter().map(|v| v.sqrt() as f32).collect()
}

fn column_vars(codes: &[Vec<f32>], dim: usize) -> Vec<f64> {
    let n = codes.len() as f64;
    let mut mean = vec![0f64; dim];
    for c in codes {
        for (m, &v) in mean.iter_mut().zip(c) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0f64; dim];
    for c in codes {
        for j in 0..dim {
            let d = c[j] as f64 - mean[j];
            var[j] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    var
}

#[derive(Debug, Clone)]
pub struct MigParams {
    pub num_bins: usize,
}

impl Default for MigParams {
    fn default() -> Self {
        MigParams {
            num_bins: DEFAULT_MIG_BINS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MigReport {
    pub score: f64,
    /// Mutual information in nats, code_dim rows by 5 factor columns.
    pub mi: Vec<Vec<f64>>,
    /// Normalized gap per factor; `None` for excluded (single-valued) factors.
    pub gaps: Vec<Option<f64>>,
    pub excluded_factors: Vec<usize>,
}

impl MigReport {
    pub fn mi_csv(&self) -> String {
        let mut out = String::from("latent,");
        out.push_str(&FACTOR_NAMES.join(","));
        out.push('\n');
        for (j, row) in self.mi.iter().enumerate() {
            out.push_str(&format!("code_{j}"));
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Equal-population bin assignment. Bin edges are the sorted values at the
/// quantile positions, so equal values always share a bin and a constant
/// column collapses to a single bin.
fn equal_population_bins(column: &[f32], num_bins: usize) -> Vec<usize> {
    let n = column.len();
    let mut sorted: Vec<f32> = column.to_vec();
    sorted.sort_by(f32::total_cmp);
    let mut edges = Vec::with_capacity(num_bins.saturating_sub(1));
    for b in 1..num_bins {
        let e = sorted[b * n / num_bins];
        if edges.last().is_none_or(|&last| e > last) && e > sorted[0] {
            edges.push(e);
        }
    }
    column
        .iter()
        .map(|&v| edges.iter().take_while(|&&e| v >= e).count())
        .collect()
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(a: &[usize], a_card: usize, b: &[usize], b_card: usize) -> f64 {
    let n = a.len();
    let mut joint = vec![0usize; a_card * b_card];
    let mut ma = vec![0usize; a_card];
    let mut mb = vec![0usize; b_card];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * b_card + y] += 1;
        ma[x] += 1;
        mb[y] += 1;
    }
    let mut mi = 0f64;
    for x in 0..a_card {
        for y in 0..b_card {
            let c = joint[x * b_card + y];
            if c == 0 {
                continue;
            }
            let p = c as f64 / n as f64;
            let px = ma[x] as f64 / n as f64;
            let py = mb[y] as f64 / n as f64;
            mi += p * (p / (px * py)).ln();
        }
    }
    mi.max(0.0)
}

/// Mutual information gap: per usable factor, (top MI - runner-up MI) over
/// the factor entropy, averaged across factors.
pub fn mig(table: &RepresentationTable, params: &MigParams) -> Result<MigReport> {
    if table.is_empty() {
        return Err(Error::Metric("mig needs a non-empty table".into()));
    }
    if params.num_bins < 2 {
        return Err(Error::Metric("mig needs num_bins >= 2".into()));
    }
    let n = table.len();
    let dim = table.code_dim;

    let binned: Vec<Vec<usize>> = (0..dim)
        .map(|j| {
            let col: Vec<f32> = table.codes.iter().map(|c| c[j]).collect();
            equal_population_bins(&col, params.num_bins)
        })
        .collect();

    let factor_cols: Vec<Vec<usize>> = (0..NUM_FACTORS)
        .map(|k| table.factors.iter().map(|f| f.label(k)).collect())
        .collect();

    let mut mi = vec![vec![0f64; NUM_FACTORS]; dim];
    let mut gaps: Vec<Option<f64>> = vec![None; NUM_FACTORS];
    let mut excluded = Vec::new();
    let mut score_sum = 0f64;
    let mut scored = 0usize;
    for k in 0..NUM_FACTORS {
        let mut counts = vec![0usize; crate::dsprites::FACTOR_SIZES[k]];
        for &v in &factor_cols[k] {
            counts[v] += 1;
        }
        let h = entropy(&counts, n);
        let distinct = counts.iter().filter(|&&c| c > 0).count();
        for (j, b) in binned.iter().enumerate() {
            mi[j][k] = mutual_information(b, params.num_bins, &factor_cols[k], counts.len());
        }
        if distinct < 2 {
            excluded.push(k);
            log::warn!("mig: factor {} is single-valued, excluded", FACTOR_NAMES[k]);
            continue;
        }
        let mut col: Vec<f64> = (0..dim).map(|j| mi[j][k]).collect();
        col.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top = col[0];
        let second = if dim > 1 { col[1] } else { 0.0 };
        let gap = ((top - second) / h).clamp(0.0, 1.0);
        gaps[k] = Some(gap);
        score_sum += gap;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Metric(
            "every factor is single-valued; mig is undefined".into(),
        ));
    }
    Ok(MigReport {
        score: score_sum / scored as f64,
        mi,
        gaps,
        excluded_factors: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconStats {
    pub bce_per_pixel: f64,
    pub l1_per_pixel: f64,
}

/// Per-pixel reconstruction statistics from logits against a target batch,
/// accumulated in f64. No sampling: callers pass posterior-mean decodes.
pub fn recon_stats_terms(logits: &Tensor, target: &Tensor) -> Result<ReconStats> {
    if logits.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            op: "recon_stats",
            lhs: logits.dims().to_vec(),
            rhs: target.dims().to_vec(),
        });
    }
    let mut bce = 0f64;
    let mut l1 = 0f64;
    for (&l, &t) in logits.data().iter().zip(target.data()) {
        let (l, t) = (l as f64, t as f64);
        bce += l.max(0.0) + (-l.abs()).exp().ln_1p() - l * t;
        l1 += (1.0 / (1.0 + (-l).exp()) - t).abs();
    }
    let n = logits.numel() as f64;
    Ok(ReconStats {
        bce_per_pixel: bce / n,
        l1_per_pixel: l1 / n,
    })
}

/// Reconstruction statistics over a whole view using posterior means.
pub fn recon_stats(model: &VaeModel, view: &DatasetView) -> Result<ReconStats> {
    let dataset = Dataset::materialize(view)?;
    let mut bce = 0f64;
    let mut l1 = 0f64;
    let mut pixels = 0f64;
    for chunk in view.indices.chunks(128) {
        let x = dataset.batch_images(chunk)?;
        let (mu, _) = model.encoder.encode(&x)?;
        let logits = model.decoder.decode(&mu)?;
        let s = recon_stats_terms(&logits, &x)?;
        let np = x.numel() as f64;
        bce += s.bce_per_pixel * np;
        l1 += s.l1_per_pixel * np;
        pixels += np;
    }
    Ok(ReconStats {
        bce_per_pixel: bce / pixels,
        l1_per_pixel: l1 / pixels,
    })
}

/// Combined metric summary, emitted as key=value text plus the MI matrix.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub fvm_accuracy: f64,
    pub fvm_excluded: Vec<usize>,
    pub mig_score: f64,
    pub mi: Vec<Vec<f64>>,
    pub recon: ReconStats,
    pub table_rows: usize,
    pub num_votes: usize,
    pub samples_per_vote: usize,
    pub num_bins: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let excluded: Vec<&str> = self.fvm_excluded.iter().map(|&k| FACTOR_NAMES[k]).collect();
        format!(
            "fvm_accuracy={:.6}\nmig={:.6}\nrecon_bce_per_pixel={:.6}\n\
             recon_l1_per_pixel={:.6}\ntable_rows={}\nnum_votes={}\n\
             samples_per_vote={}\nnum_bins={}\nseed={}\nexcluded_factors={}\n",
            self.fvm_accuracy,
            self.mig_score,
            self.recon.bce_per_pixel,
            self.recon.l1_per_pixel,
            self.table_rows,
            self.num_votes,
            self.samples_per_vote,
            self.num_bins,
            self.seed,
            excluded.join(";"),
        )
    }
}

/// Checks factor_to_index/index_to_factor agreement for table rows; used by
/// CSV import paths to fail fast on corrupt label columns.
pub fn validate_table(table: &RepresentationTable) -> Result<()> {
    for f in &table.factors {
        let i = factor_to_index(f)?;
        let back = index_to_factor(i)?;
        if back.labels() != f.labels() {
            return Err(Error::Metric(format!("factor tuple {:?} fails round-trip", f.labels())));
        }
    }
    Ok(())
}
