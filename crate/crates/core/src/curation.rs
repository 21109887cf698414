//! Person-crop filtering over detection and pose records, and template
//! clustering and selection over caption-template embeddings.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::seeding::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub bbox_width: f64,
    pub bbox_height: f64,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointCategory {
    Head,
    Hip,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub category: KeypointCategory,
    pub visible: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub keypoints: Vec<Keypoint>,
}

/// One input line of the `filter` command: a detection with its pose, if
/// the pose estimator produced one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    #[serde(flatten)]
    pub detection: DetectionRecord,
    #[serde(default)]
    pub pose: Option<PoseRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCriteria {
    pub min_short_side: f64,
    pub aspect_lo: f64,
    pub aspect_hi: f64,
    pub min_confidence: f64,
    pub min_visible_kp: usize,
    pub min_hip: usize,
    pub min_head: usize,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        Self {
            min_short_side: 90.0,
            aspect_lo: 2.0,
            aspect_hi: 4.0,
            min_confidence: 0.85,
            min_visible_kp: 8,
            min_hip: 1,
            min_head: 2,
        }
    }
}

impl FilterCriteria {
    pub fn validate(&self) -> Result<()> {
        let positive = self.min_short_side > 0.0
            && self.aspect_lo > 0.0
            && self.min_confidence > 0.0
            && self.min_visible_kp > 0
            && self.min_hip > 0
            && self.min_head > 0;
        if !positive || !(self.aspect_lo < self.aspect_hi) {
            return Err(Error::Config(format!("invalid filter criteria {self:?}")));
        }
        Ok(())
    }
}

/// Why a record was rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    ShortSide,
    Aspect,
    Confidence,
    PoseMissing,
    KeypointCount,
    Hip,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reasons", rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject(Vec<RejectReason>),
}

impl Verdict {
    fn from_reasons(reasons: Vec<RejectReason>) -> Self {
        if reasons.is_empty() {
            Verdict::Accept
        } else {
            Verdict::Reject(reasons)
        }
    }

    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }

    pub fn reasons(&self) -> &[RejectReason] {
        match self {
            Verdict::Accept => &[],
            Verdict::Reject(r) => r,
        }
    }
}

fn detection_reasons(rec: &DetectionRecord, crit: &FilterCriteria) -> Result<Vec<RejectReason>> {
    let (w, h) = (rec.bbox_width, rec.bbox_height);
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(Error::MalformedRecord {
            id: rec.image_id.clone(),
            reason: format!("bbox {w}x{h} is not positive"),
        });
    }
    if !(0.0..=1.0).contains(&rec.confidence) {
        return Err(Error::MalformedRecord {
            id: rec.image_id.clone(),
            reason: format!("confidence {} outside [0, 1]", rec.confidence),
        });
    }
    let mut out = Vec::new();
    if !(w.min(h) > crit.min_short_side) {
        out.push(RejectReason::ShortSide);
    }
    let aspect = h / w;
    if !(crit.aspect_lo <= aspect && aspect <= crit.aspect_hi) {
        out.push(RejectReason::Aspect);
    }
    if !(rec.confidence > crit.min_confidence) {
        out.push(RejectReason::Confidence);
    }
    Ok(out)
}

fn pose_reasons(rec: &PoseRecord, crit: &FilterCriteria) -> Vec<RejectReason> {
    let visible = rec.keypoints.iter().filter(|k| k.visible);
    let (mut total, mut hip, mut head) = (0, 0, 0);
    for k in visible {
        total += 1;
        match k.category {
            KeypointCategory::Hip => hip += 1,
            KeypointCategory::Head => head += 1,
            KeypointCategory::Other => {}
        }
    }
    let mut out = Vec::new();
    if total < crit.min_visible_kp {
        out.push(RejectReason::KeypointCount);
    }
    if hip < crit.min_hip {
        out.push(RejectReason::Hip);
    }
    if head < crit.min_head {
        out.push(RejectReason::Head);
    }
    out
}

/// Geometry and confidence rules. Every violated rule is listed.
pub fn filter_person_crop(rec: &DetectionRecord, crit: &FilterCriteria) -> Result<Verdict> {
    detection_reasons(rec, crit).map(Verdict::from_reasons)
}

/// Keypoint visibility rules.
pub fn verify_pose(rec: &PoseRecord, crit: &FilterCriteria) -> Verdict {
    Verdict::from_reasons(pose_reasons(rec, crit))
}

/// Both rule sets; a record without a pose fails the pose stage.
pub fn screen(rec: &CropRecord, crit: &FilterCriteria) -> Result<Verdict> {
    let mut reasons = detection_reasons(&rec.detection, crit)?;
    match &rec.pose {
        Some(pose) => {
            let mut names = BTreeSet::new();
            if let Some(k) = pose.keypoints.iter().find(|k| !names.insert(&k.name)) {
                return Err(Error::MalformedRecord {
                    id: rec.detection.image_id.clone(),
                    reason: format!("duplicate keypoint {:?}", k.name),
                });
            }
            reasons.extend(pose_reasons(pose, crit));
        }
        None => reasons.push(RejectReason::PoseMissing),
    }
    Ok(Verdict::from_reasons(reasons))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub image_id: String,
    #[serde(flatten)]
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub accepted: Vec<CropRecord>,
    pub audit: Vec<AuditEntry>,
}

pub fn filter_records(records: &[CropRecord], crit: &FilterCriteria) -> Result<FilterOutcome> {
    crit.validate()?;
    let mut accepted = Vec::new();
    let mut audit = Vec::with_capacity(records.len());
    for rec in records {
        let verdict = screen(rec, crit)?;
        if verdict.is_accept() {
            accepted.push(rec.clone());
        }
        audit.push(AuditEntry {
            image_id: rec.detection.image_id.clone(),
            verdict,
        });
    }
    Ok(FilterOutcome { accepted, audit })
}

/// Reads crop records, writes the accepted manifest and the audit log.
pub fn run_filter(
    input: &Path,
    accepted_out: &Path,
    audit_out: &Path,
    crit: &FilterCriteria,
) -> Result<FilterOutcome> {
    let records: Vec<CropRecord> = jsonl::read(input)?;
    let outcome = filter_records(&records, crit)?;
    jsonl::write(accepted_out, &outcome.accepted)?;
    jsonl::write(audit_out, &outcome.audit)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub template_id: String,
    pub text: String,
    pub embedding: Vec<f64>,
}

impl TemplateRecord {
    pub fn validate(&self) -> Result<()> {
        let norm = self.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::MalformedRecord {
                id: self.template_id.clone(),
                reason: format!("embedding norm {norm} is not 1"),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 300,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: the first centroid uniformly at random, each further
/// one with probability proportional to its squared distance from the
/// closest centroid chosen so far.
pub fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "k = {k} must lie in [1, {}]",
            points.len()
        )));
    }
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = d2.iter().rposition(|&d| d > 0.0).expect("positive mass");
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// Lloyd iterations from the given centroids. An emptied cluster is
/// re-seeded at the point farthest from its assigned centroid.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> Clustering {
    let dim = points.first().map_or(0, Vec::len);
    let k = init.len();
    let mut centroids = init;
    let mut assignments = vec![0; points.len()];
    let mut objective_history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut objective = 0.0;
        let mut dists = Vec::with_capacity(points.len());
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centroids);
            *a = c;
            objective += d;
            dists.push(d);
        }
        objective_history.push(objective);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next = if counts[c] == 0 {
                let far = (0..points.len())
                    .fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                dists[far] = 0.0;
                points[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < tol {
            break;
        }
    }
    // final assignment against the converged centroids
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    Clustering {
        assignments,
        centroids,
        iterations,
        objective_history,
    }
}

pub fn cluster_templates(records: &[TemplateRecord], cfg: &KMeansConfig) -> Result<Clustering> {
    for r in records {
        r.validate()?;
    }
    if let Some(r) = records
        .iter()
        .find(|r| r.embedding.len() != records[0].embedding.len())
    {
        return Err(Error::MalformedRecord {
            id: r.template_id.clone(),
            reason: "embedding dimension differs from the first record".into(),
        });
    }
    let points: Vec<Vec<f64>> = records.iter().map(|r| r.embedding.clone()).collect();
    let mut rng = stream_rng(cfg.seed, Stream::Cluster, 0, 0);
    let init = kmeans_pp_init(&points, cfg.k, &mut rng)?;
    Ok(lloyd(&points, init, cfg.max_iter, cfg.tol))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRole {
    Representative,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedTemplate {
    pub template_id: String,
    pub text: String,
    pub role: SelectionRole,
    pub centroid_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSelection {
    pub cluster: usize,
    pub size: usize,
    pub templates: Vec<SelectedTemplate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub k: usize,
    pub seed: u64,
    pub clusters: Vec<ClusterSelection>,
}

impl TemplateBank {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("template bank", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn texts(&self) -> Vec<&str> {
        self.clusters
            .iter()
            .flat_map(|c| c.templates.iter().map(|t| t.text.as_str()))
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per cluster: the member closest in cosine to the centroid (ties to the
/// lowest `template_id`) plus up to `per_cluster_random` distinct others.
pub fn select_templates(
    records: &[TemplateRecord],
    clustering: &Clustering,
    per_cluster_random: usize,
    seed: u64,
) -> Result<TemplateBank> {
    if records.len() != clustering.assignments.len() {
        return Err(Error::Alignment(format!(
            "{} templates but {} assignments",
            records.len(),
            clustering.assignments.len()
        )));
    }
    let mut clusters = Vec::new();
    for (c, centroid) in clustering.centroids.iter().enumerate() {
        let members = clustering.members(c);
        if members.is_empty() {
            log::warn!("cluster {c} is empty; skipped");
            continue;
        }
        let cos: Vec<f64> = members
            .iter()
            .map(|&i| cosine(&records[i].embedding, centroid))
            .collect();
        let mut rep = 0;
        for j in 1..members.len() {
            let better = cos[j] > cos[rep]
                || (cos[j] == cos[rep]
                    && records[members[j]].template_id < records[members[rep]].template_id);
            if better {
                rep = j;
            }
        }
        let pick = |j: usize, role| SelectedTemplate {
            template_id: records[members[j]].template_id.clone(),
            text: records[members[j]].text.clone(),
            role,
            centroid_cosine: cos[j],
        };
        let mut templates = vec![pick(rep, SelectionRole::Representative)];
        let others: Vec<usize> = (0..members.len()).filter(|&j| j != rep).collect();
        let n = per_cluster_random.min(others.len());
        let mut rng = stream_rng(seed, Stream::Select, c as u64, 0);
        let mut chosen: Vec<usize> = sample(&mut rng, others.len(), n).into_vec();
        chosen.sort_unstable();
        templates.extend(chosen.into_iter().map(|o| pick(others[o], SelectionRole::Random)));
        clusters.push(ClusterSelection {
            cluster: c,
            size: members.len(),
            templates,
        });
    }
    Ok(TemplateBank {
        k: clustering.centroids.len(),
        seed,
        clusters,
    })
}

/// Clusters and selects in one go, writing the bank to `out`.
pub fn run_curate_templates(
    input: &Path,
    out: &Path,
    cfg: &KMeansConfig,
    per_cluster_random: usize,
) -> Result<TemplateBank> {
    let records: Vec<TemplateRecord> = jsonl::read(input)?;
    let clustering = cluster_templates(&records, cfg)?;
    let bank = select_templates(&records, &clustering, per_cluster_random, cfg.seed)?;
    bank.save(out)?;
    Ok(bank)
}
