//! Countermeasure metrics: EER, normalized minimum t-DCF, AUC and DET points.
//!
//! Scores are "higher = more bonafide". A trial is accepted as bonafide at
//! threshold `t` when `score >= t`. Operating points are taken at every
//! distinct score plus `+inf` (everything rejected).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    /// Training label: 1 for bonafide, 0 for spoof.
    pub fn label(self) -> f32 {
        match self {
            Key::Bonafide => 1.0,
            Key::Spoof => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Key> {
        match s {
            "bonafide" => Ok(Key::Bonafide),
            "spoof" => Ok(Key::Spoof),
            other => Err(Error::Data(format!("unknown key {other:?}"))),
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utterance_id: String,
    pub score: f64,
    pub key: Key,
}

impl ScoreRecord {
    pub fn new(utterance_id: impl Into<String>, score: f64, key: Key) -> Self {
        ScoreRecord {
            utterance_id: utterance_id.into(),
            score,
            key,
        }
    }
}

/// Weights of the tandem cost. Defaults follow the ASVspoof 2019 evaluation
/// convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcfParams {
    pub p_spoof: f64,
    /// Share of non-spoof trials that are target trials.
    pub p_target_given_genuine: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    pub p_miss_asv: f64,
    pub p_fa_asv: f64,
    /// Rate at which the ASV system accepts spoofs.
    pub p_fa_spoof_asv: f64,
}

impl Default for TdcfParams {
    fn default() -> Self {
        TdcfParams {
            p_spoof: 0.05,
            p_target_given_genuine: 0.99,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            p_miss_asv: 0.01,
            p_fa_asv: 0.01,
            p_fa_spoof_asv: 0.5,
        }
    }
}

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_spoof", self.p_spoof),
            ("p_target_given_genuine", self.p_target_given_genuine),
            ("p_miss_asv", self.p_miss_asv),
            ("p_fa_asv", self.p_fa_asv),
            ("p_fa_spoof_asv", self.p_fa_spoof_asv),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("t-DCF {name} = {p} outside [0, 1]")));
            }
        }
        let costs = [
            ("c_miss_asv", self.c_miss_asv),
            ("c_fa_asv", self.c_fa_asv),
            ("c_miss_cm", self.c_miss_cm),
            ("c_fa_cm", self.c_fa_cm),
        ];
        for (name, c) in costs {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("t-DCF {name} = {c} must be > 0")));
            }
        }
        Ok(())
    }

    /// `(w_miss, w_fa)` so that t-DCF = w_miss * Pmiss_cm + w_fa * Pfa_cm.
    pub fn weights(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let p_tar = (1.0 - self.p_spoof) * self.p_target_given_genuine;
        let p_non = (1.0 - self.p_spoof) * (1.0 - self.p_target_given_genuine);
        let w_miss = p_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv) - p_non * self.c_fa_asv * self.p_fa_asv;
        let w_fa = self.c_fa_cm * self.p_spoof * self.p_fa_spoof_asv;
        if w_miss <= 0.0 || w_fa <= 0.0 {
            return Err(Error::Config(format!(
                "t-DCF weights must be positive, got miss {w_miss}, false alarm {w_fa}"
            )));
        }
        Ok((w_miss, w_fa))
    }
}

/// One point of the sweep. `threshold` is `+inf` for the reject-all point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn split(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::Metric(format!("non-finite score for {}", r.utterance_id)));
        }
        match r.key {
            Key::Bonafide => bona.push(r.score),
            Key::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Metric(format!(
            "need both classes, got {} bonafide and {} spoof",
            bona.len(),
            spoof.len()
        )));
    }
    Ok((bona, spoof))
}

/// Operating points at every distinct score (ascending) and at `+inf`.
pub fn operating_points(records: &[ScoreRecord]) -> Result<Vec<OperatingPoint>> {
    let (mut bona, mut spoof) = split(records)?;
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    // Counts strictly below the threshold, advanced monotonically.
    let (mut ib, mut is) = (0usize, 0usize);
    let mut pts = Vec::with_capacity(thresholds.len() + 1);
    for &t in &thresholds {
        while ib < bona.len() && bona[ib] < t {
            ib += 1;
        }
        while is < spoof.len() && spoof[is] < t {
            is += 1;
        }
        pts.push(OperatingPoint {
            threshold: t,
            far: (spoof.len() - is) as f64 / ns,
            frr: ib as f64 / nb,
        });
    }
    pts.push(OperatingPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(pts)
}

/// Equal error rate and its threshold, interpolating linearly between the
/// two operating points where FAR - FRR changes sign.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let pts = operating_points(records)?;
    Ok(eer_from_points(&pts))
}

fn eer_from_points(pts: &[OperatingPoint]) -> (f64, f64) {
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.far - a.frr;
        let db = b.far - b.frr;
        if da == 0.0 {
            return (a.far, a.threshold);
        }
        if da > 0.0 && db <= 0.0 {
            let alpha = da / (da - db);
            let eer = a.far + alpha * (b.far - a.far);
            let thr = if b.threshold.is_finite() {
                a.threshold + alpha * (b.threshold - a.threshold)
            } else {
                a.threshold
            };
            return (eer, thr);
        }
    }
    // FAR - FRR ends at -1, so the loop always returns for valid input.
    let last = pts[pts.len() - 1];
    (last.far, last.threshold)
}

/// t-DCF normalized by `min(w_miss, w_fa)`, the cost of the better of the
/// two trivial decisions.
pub fn tdcf_at(records: &[ScoreRecord], params: &TdcfParams, threshold: f64) -> Result<f64> {
    let (bona, spoof) = split(records)?;
    let (w_miss, w_fa) = params.weights()?;
    let frr = bona.iter().filter(|&&s| s < threshold).count() as f64 / bona.len() as f64;
    let far = spoof.iter().filter(|&&s| s >= threshold).count() as f64 / spoof.len() as f64;
    Ok((w_miss * frr + w_fa * far) / w_miss.min(w_fa))
}

/// Minimum normalized t-DCF over the threshold sweep, with its threshold.
pub fn compute_min_tdcf(records: &[ScoreRecord], params: &TdcfParams) -> Result<(f64, f64)> {
    let (w_miss, w_fa) = params.weights()?;
    let pts = operating_points(records)?;
    let norm = w_miss.min(w_fa);
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in &pts {
        let c = (w_miss * p.frr + w_fa * p.far) / norm;
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    Ok(best)
}

/// Probability that a random bonafide trial outscores a random spoof trial,
/// ties counted one half (rank-sum form with average ranks).
pub fn compute_auc(records: &[ScoreRecord]) -> Result<f64> {
    let (bona, spoof) = split(records)?;
    let mut all: Vec<(f64, bool)> = bona
        .iter()
        .map(|&s| (s, true))
        .chain(spoof.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    Ok((rank_sum - nb * (nb + 1.0) / 2.0) / (nb * ns))
}

/// `(FAR, FRR)` pairs in ascending threshold order, from `(1, 0)` to `(0, 1)`.
pub fn det_points(records: &[ScoreRecord]) -> Result<Vec<(f64, f64)>> {
    Ok(operating_points(records)?.iter().map(|p| (p.far, p.frr)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: f64,
    pub tdcf_threshold: f64,
    pub auc: f64,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

impl MetricsReport {
    pub fn compute(records: &[ScoreRecord], params: &TdcfParams) -> Result<MetricsReport> {
        let (eer, eer_threshold) = compute_eer(records)?;
        let (min_tdcf, tdcf_threshold) = compute_min_tdcf(records, params)?;
        let auc = compute_auc(records)?;
        let n_bonafide = records.iter().filter(|r| r.key == Key::Bonafide).count();
        Ok(MetricsReport {
            eer,
            eer_threshold,
            min_tdcf,
            tdcf_threshold,
            auc,
            n_bonafide,
            n_spoof: records.len() - n_bonafide,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "EER {:.3}%  min t-DCF {:.4}  AUC {:.4}  ({} bonafide, {} spoof)",
            self.eer * 100.0,
            self.min_tdcf,
            self.auc,
            self.n_bonafide,
            self.n_spoof
        )
    }

    /// Tab-separated header and one row.
    pub fn to_tsv(&self) -> String {
        format!(
            "eer_percent\teer_threshold\tmin_tdcf\ttdcf_threshold\tauc\tn_bonafide\tn_spoof\n\
             {:.3}\t{:.6}\t{:.4}\t{:.6}\t{:.4}\t{}\t{}\n",
            self.eer * 100.0,
            self.eer_threshold,
            self.min_tdcf,
            self.tdcf_threshold,
            self.auc,
            self.n_bonafide,
            self.n_spoof
        )
    }
}

/// Writes `utterance_id score` lines with six decimals.
pub fn write_scores(path: &Path, records: &[(String, f64)]) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 24);
    for (id, s) in records {
        out.push_str(&format!("{id} {s:.6}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| Error::Protocol {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, score] = fields[..] else {
            return Err(bad(format!("expected 2 fields, got {}", fields.len())));
        };
        let s: f64 = score.parse().map_err(|_| bad(format!("bad score {score:?}")))?;
        if !s.is_finite() {
            return Err(bad(format!("non-finite score {score:?}")));
        }
        out.push((id.to_string(), s));
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

/// Attaches keys to scores. Every scored utterance must have a key.
pub fn join_keys(scores: &[(String, f64)], keys: &HashMap<String, Key>) -> Result<Vec<ScoreRecord>> {
    scores
        .iter()
        .map(|(id, s)| {
            keys.get(id)
                .map(|&k| ScoreRecord::new(id.clone(), *s, k))
                .ok_or_else(|| Error::Metric(format!("no key for scored utterance {id}")))
        })
        .collect()
}
