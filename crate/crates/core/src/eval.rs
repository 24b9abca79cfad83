//! Detection-level evaluation: thresholded masks, components, Dice matching,
//! EER, AUC and FROC curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{BlobKind, Problem, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DICE_MIN: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Every relevant sample; classifier negatives contribute no detections.
    All,
    /// Only samples the classifier marked positive.
    CPlus,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::All => "all",
            Scenario::CPlus => "c_plus",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scenario::All),
            "c_plus" => Ok(Scenario::CPlus),
            _ => Err(Error::Config(format!("unknown scenario `{s}`"))),
        }
    }
}

/// A 2-D bit mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("BinaryMask", format!("{} bits for {height}x{width}", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Sorted indices of the set pixels.
    pub fn pixels(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

fn plane_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] if shape[..shape.len() - 2].iter().all(|&d| d == 1) => Ok((*h, *w)),
        _ => Err(Error::shape(op, format!("expected a single [.., H, W] plane, got {shape:?}"))),
    }
}

/// Pixels with `m > tau`, strictly.
pub fn threshold_mask(m: &Tensor<f32>, tau: f32) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("tau {tau} is outside [0, 1]")));
    }
    let (h, w) = plane_dims(m.shape(), "threshold_mask")?;
    BinaryMask::new(h, w, m.data().iter().map(|&v| v > tau).collect())
}

/// Binary segmentation tensor to sorted pixel indices.
pub fn mask_pixels(seg: &Tensor<f32>) -> Vec<usize> {
    seg.data().iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 4-connected components as sorted pixel-index lists, ordered by their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !mask.bits[i] {
                continue;
            }
            for j in [(c > 0).then(|| i - 1), (r > 0).then(|| i - w)].into_iter().flatten() {
                if mask.bits[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..h * w {
        if mask.bits[i] {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(i);
        }
    }
    // Roots are always the smallest index of their set, so map order is first-pixel order.
    groups.into_values().collect()
}

/// `2|a ∩ b| / (|a| + |b|)` over sorted index sets; 0 when both are empty.
pub fn dice(a: &[usize], b: &[usize]) -> f32 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    (2.0 * inter as f64 / (a.len() + b.len()) as f64) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub pixels: Vec<usize>,
    pub best_gt: Option<usize>,
    pub dice: f32,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub matched: BTreeSet<usize>,
    pub detections: Vec<Detection>,
}

/// Each component is matched to the ground truth of highest Dice (lowest index on ties)
/// and counts as a true positive when that Dice reaches `dice_min`.
pub fn match_detections(components: &[Vec<usize>], ground_truths: &[Vec<usize>], dice_min: f32) -> Result<MatchResult> {
    if !(dice_min > 0.0 && dice_min <= 1.0) {
        return Err(Error::Contract(format!("dice_min {dice_min} is outside (0, 1]")));
    }
    let mut out = MatchResult::default();
    for comp in components {
        let mut best: Option<(usize, f32)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            let d = dice(comp, gt);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((g, d));
            }
        }
        let (best_gt, d) = match best {
            Some((g, d)) if d > 0.0 => (Some(g), d),
            _ => (None, 0.0),
        };
        let tp = best_gt.is_some() && d >= dice_min;
        if tp {
            out.tp += 1;
            out.matched.insert(best_gt.expect("tp implies a match"));
        } else {
            out.fp += 1;
        }
        out.detections.push(Detection {
            pixels: comp.clone(),
            best_gt,
            dice: d,
            true_positive: tp,
        });
    }
    Ok(out)
}

fn rates(pos: &[f32], neg: &[f32], t: f64) -> (f64, f64) {
    let fp = neg.iter().filter(|&&s| s as f64 > t).count();
    let fn_ = pos.iter().filter(|&&s| s as f64 <= t).count();
    (fp as f64 / neg.len() as f64, fn_ as f64 / pos.len() as f64)
}

/// Candidate thresholds: midpoints of adjacent distinct scores plus one sentinel
/// below the minimum and one above the maximum, ascending.
pub fn eer_candidates(pos: &[f32], neg: &[f32]) -> Vec<f64> {
    let mut all: Vec<f64> = pos.iter().chain(neg).map(|&s| s as f64).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut c = Vec::with_capacity(all.len() + 1);
    c.push(all[0] - 1.0);
    c.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    c.push(all[all.len() - 1] + 1.0);
    c
}

/// Equal-error-rate operating point `(threshold, (FPR + FNR) / 2)`. A score is
/// positive when it is strictly above the threshold.
pub fn compute_eer(pos: &[f32], neg: &[f32]) -> Result<(f64, f64)> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("EER needs nonempty positive and negative score sets".into()));
    }
    if pos.iter().chain(neg).any(|s| !s.is_finite()) {
        return Err(Error::Contract("EER scores must be finite".into()));
    }
    let cands = eer_candidates(pos, neg);
    let mut p: Vec<f64> = pos.iter().map(|&s| s as f64).collect();
    let mut n: Vec<f64> = neg.iter().map(|&s| s as f64).collect();
    p.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    // Sweep ascending thresholds; `ip`/`in_` count scores <= t.
    let (mut ip, mut in_) = (0usize, 0usize);
    let mut best: Option<(f64, f64, f64)> = None;
    for &t in &cands {
        while ip < p.len() && p[ip] <= t {
            ip += 1;
        }
        while in_ < n.len() && n[in_] <= t {
            in_ += 1;
        }
        let fpr = (n.len() - in_) as f64 / n.len() as f64;
        let fnr = ip as f64 / p.len() as f64;
        let gap = (fpr - fnr).abs();
        // Strict improvement only, so the lowest threshold wins ties.
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, t, 0.5 * (fpr + fnr)));
        }
    }
    let (_, t, eer) = best.expect("at least two candidates");
    Ok((t, eer))
}

/// Brute-force counterpart of [`compute_eer`], quadratic in the number of scores.
pub fn compute_eer_scan(pos: &[f32], neg: &[f32]) -> Result<(f64, f64)> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("EER needs nonempty positive and negative score sets".into()));
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for t in eer_candidates(pos, neg) {
        let (fpr, fnr) = rates(pos, neg, t);
        let gap = (fpr - fnr).abs();
        let better = match best {
            None => true,
            Some((g, bt, _)) => gap < g || (gap == g && t < bt),
        };
        if better {
            best = Some((gap, t, 0.5 * (fpr + fnr)));
        }
    }
    let (_, t, eer) = best.expect("candidates nonempty");
    Ok((t, eer))
}

/// Area under the ROC curve; tied scores count one half.
pub fn auc(pos: &[f32], neg: &[f32]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedRate("AUC needs both classes".into()));
    }
    let mut all: Vec<(f32, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with average ranks for ties.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Per-sample classifier output and optional saliency mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub prob: f32,
    pub positive: bool,
    pub mask: Option<Tensor<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub tau: f32,
    pub tpr: f32,
    pub fpd: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    pub scenario: Scenario,
    pub problem: Problem,
    /// Monotone operating points, `tau` strictly decreasing.
    pub points: Vec<FrocPoint>,
    /// One point per grid value, `tau` decreasing, before monotone filtering.
    pub raw: Vec<FrocPoint>,
}

impl FrocCurve {
    pub fn is_monotone(&self) -> bool {
        is_monotone(&self.points)
    }

    /// Highest TPR among points with `fpd <= max_fpd`.
    pub fn tpr_at(&self, max_fpd: f32) -> Option<f32> {
        self.points.iter().filter(|p| p.fpd <= max_fpd).map(|p| p.tpr).reduce(f32::max)
    }
}

/// `tau` strictly decreasing with `tpr` and `fpd` each non-decreasing.
pub fn is_monotone(points: &[FrocPoint]) -> bool {
    points
        .windows(2)
        .all(|w| w[1].tau < w[0].tau && w[1].tpr >= w[0].tpr && w[1].fpd >= w[0].fpd)
}

pub fn default_tau_grid() -> Vec<f32> {
    (0..=100).map(|i| i as f32 / 100.0).collect()
}

fn relevant_gts(sample: &Sample, problem: Problem) -> Vec<Vec<usize>> {
    sample
        .segmentations
        .iter()
        .zip(&sample.seg_kinds)
        .filter(|(_, k)| problem == Problem::Lesion || **k == BlobKind::Malignant)
        .map(|(s, _)| mask_pixels(s))
        .collect()
}

/// Operating point at one threshold over the evaluated samples.
pub fn froc_point(
    evaluated: &[(&Sample, &Prediction, &[Vec<usize>])],
    tau: f32,
    dice_min: f32,
    lesions: usize,
    patients: usize,
) -> Result<FrocPoint> {
    let (mut detected, mut fps) = (0usize, 0usize);
    for (_, pred, gts) in evaluated {
        let Some(mask) = &pred.mask else { continue };
        let comps = connected_components(&threshold_mask(mask, tau)?);
        let r = match_detections(&comps, gts, dice_min)?;
        detected += r.matched.len();
        fps += r.fp;
    }
    Ok(FrocPoint {
        tau,
        tpr: (detected as f64 / lesions as f64) as f32,
        fpd: (fps as f64 / patients as f64) as f32,
    })
}

/// Sweeps `taus` from high to low. TPR is detected relevant lesions over all
/// relevant lesions; FPD is false positives over patients with a relevant lesion.
pub fn froc_curve(
    predictions: &[Prediction],
    samples: &[&Sample],
    scenario: Scenario,
    problem: Problem,
    taus: &[f32],
    dice_min: f32,
) -> Result<FrocCurve> {
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut gts_store = Vec::with_capacity(samples.len());
    let mut kept = Vec::new();
    for s in samples {
        let pred = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::Contract(format!("no prediction for sample `{}`", s.id)))?;
        if scenario == Scenario::CPlus && !pred.positive {
            continue;
        }
        if pred.positive && pred.mask.is_none() {
            return Err(Error::Contract(format!("positive sample `{}` has no mask", s.id)));
        }
        gts_store.push(relevant_gts(s, problem));
        kept.push((*s, *pred));
    }
    let lesions: usize = gts_store.iter().map(Vec::len).sum();
    let patients: BTreeSet<&str> = kept
        .iter()
        .zip(&gts_store)
        .filter(|(_, g)| !g.is_empty())
        .map(|((s, _), _)| s.patient_id.as_str())
        .collect();
    if lesions == 0 || patients.is_empty() {
        return Err(Error::UndefinedRate(format!(
            "{} scenario has no relevant lesions for the {problem:?} problem",
            scenario.as_str()
        )));
    }
    let evaluated: Vec<(&Sample, &Prediction, &[Vec<usize>])> =
        kept.iter().zip(&gts_store).map(|((s, p), g)| (*s, *p, g.as_slice())).collect();

    let mut grid: Vec<f32> = taus.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    let raw = grid
        .iter()
        .map(|&t| froc_point(&evaluated, t, dice_min, lesions, patients.len()))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrocCurve {
        scenario,
        problem,
        points: monotone_envelope(&raw),
        raw,
    })
}

/// Monotone curve from raw operating points: the Pareto-optimal points (no other
/// point has lower-or-equal FPD with higher-or-equal TPR), chained in order of
/// increasing FPD along the longest run of strictly decreasing `tau`.
pub fn monotone_envelope(raw: &[FrocPoint]) -> Vec<FrocPoint> {
    let dominated = |p: &FrocPoint, i: usize| {
        raw.iter().enumerate().any(|(j, q)| {
            let strictly = q.fpd < p.fpd || q.tpr > p.tpr;
            let ties_earlier = q.fpd == p.fpd && q.tpr == p.tpr && j < i;
            q.fpd <= p.fpd && q.tpr >= p.tpr && (strictly || ties_earlier)
        })
    };
    let mut front: Vec<FrocPoint> = raw.iter().enumerate().filter(|(i, p)| !dominated(p, *i)).map(|(_, p)| *p).collect();
    front.sort_by(|a, b| a.fpd.total_cmp(&b.fpd).then(a.tpr.total_cmp(&b.tpr)).then(b.tau.total_cmp(&a.tau)));
    // Longest subsequence with strictly decreasing tau; earliest predecessor on ties.
    let n = front.len();
    let mut len = vec![1usize; n];
    let mut prev = vec![usize::MAX; n];
    for i in 0..n {
        for j in 0..i {
            if front[j].tau > front[i].tau && len[j] + 1 > len[i] {
                len[i] = len[j] + 1;
                prev[i] = j;
            }
        }
    }
    let Some(mut end) = (0..n).rev().max_by_key(|&i| len[i]) else {
        return Vec::new();
    };
    let mut chain = vec![front[end]];
    while prev[end] != usize::MAX {
        end = prev[end];
        chain.push(front[end]);
    }
    chain.reverse();
    chain
}

pub fn froc_csv(points: &[FrocPoint]) -> String {
    let mut s = String::from("tau,tpr,fpd\n");
    for p in points {
        writeln!(s, "{:.8e},{:.8e},{:.8e}", p.tau, p.tpr, p.fpd).expect("string write");
    }
    s
}

pub fn parse_froc_csv(text: &str, path: &Path) -> Result<Vec<FrocPoint>> {
    let mut lines = text.lines();
    if lines.next() != Some("tau,tpr,fpd") {
        return Err(Error::format(path, "header", "expected `tau,tpr,fpd`"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let v: Vec<f32> = line
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("row {}", i + 1), format!("{e}")))?;
            match v[..] {
                [tau, tpr, fpd] => Ok(FrocPoint { tau, tpr, fpd }),
                _ => Err(Error::format(path, format!("row {}", i + 1), "expected 3 columns")),
            }
        })
        .collect()
}

pub fn froc_svg(curve: &FrocCurve) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 50.0;
    let max_fpd = curve.points.iter().map(|p| p.fpd as f64).fold(1.0, f64::max);
    let sx = |f: f64| M + f / max_fpd * (W - 2.0 * M);
    let sy = |t: f64| H - M - t * (H - 2.0 * M);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(s, r#"  <rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"  <line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - M,
        W - M,
        H - M
    )
    .unwrap();
    writeln!(s, r#"  <line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M).unwrap();
    writeln!(
        s,
        r#"  <text x="{}" y="{}" text-anchor="middle" font-size="14">False positives per patient</text>"#,
        W / 2.0,
        H - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"  <text x="16" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 16 {})">True positive rate</text>"#,
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r#"  <text x="{}" y="24" text-anchor="middle" font-size="14">FROC ({:?}, {})</text>"#,
        W / 2.0,
        curve.problem,
        curve.scenario.as_str()
    )
    .unwrap();
    for (v, label) in [(0.0, "0"), (max_fpd, &format!("{max_fpd:.2}")[..])] {
        writeln!(s, r#"  <text x="{:.2}" y="{}" text-anchor="middle" font-size="11">{label}</text>"#, sx(v), H - M + 16.0).unwrap();
    }
    for (v, label) in [(0.0, "0"), (1.0, "1")] {
        writeln!(s, r#"  <text x="{}" y="{:.2}" text-anchor="end" font-size="11">{label}</text>"#, M - 6.0, sy(v) + 4.0).unwrap();
    }
    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.fpd as f64), sy(p.tpr as f64)))
        .collect();
    writeln!(s, r#"  <polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" ")).unwrap();
    s.push_str("</svg>\n");
    s
}

/// Writes `froc.csv`, `froc_raw.csv` and `froc.svg` into `dir`.
pub fn emit_results(curve: &FrocCurve, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [
        ("froc.csv", froc_csv(&curve.points)),
        ("froc_raw.csv", froc_csv(&curve.raw)),
        ("froc.svg", froc_svg(curve)),
    ] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
