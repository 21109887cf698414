//! End-to-end acceptance checks. Each test prints one PASS/FAIL line and
//! runs alone so that its wall-clock budget is measured without contention.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gradmask_core::checkpoint;
use gradmask_core::corpus::{Corpus, CorpusConfig, Split};
use gradmask_core::curation::{cluster_templates, filter_records, select_templates, CropRecord, FilterCriteria, KMeansConfig, SelectionRole, TemplateRecord};
use gradmask_core::dualmask::{informative_mask_prob, noise_mask_prob, sample_mask_with, MaskConfig};
use gradmask_core::encoder::{DualEncoder, EncoderConfig, ImagePatchGrid, Perturbation, SpecialIds, TokenSequence};
use gradmask_core::gass::{attention_score, fuse_scores, layer_scores, normalize_scores, GassConfig, GassScores};
use gradmask_core::jsonl;
use gradmask_core::objectives::{mtp_loss, sdm_graph, sdm_loss, MatchLabels, SdmConfig, SdmDistributions};
use gradmask_core::retrieval::{average_precision, mean_average_precision, rank_k, ScoreMatrix};
use gradmask_core::tape::{Graph, Mat, ParamStore};
use gradmask_core::train::{baseline_step, epoch_batches, fit, train_step, Dataset, FitOptions, TrainConfig, TrainState};

static SERIAL: Mutex<()> = Mutex::new(());

struct Verdict {
    id: u32,
    name: &'static str,
    budget: Duration,
    started: Instant,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn new(id: u32, name: &'static str, budget_secs: u64) -> Self {
        Self {
            id,
            name,
            budget: Duration::from_secs(budget_secs),
            started: Instant::now(),
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    fn finish(mut self) {
        let elapsed = self.started.elapsed();
        if elapsed > self.budget {
            self.failures
                .push(format!("took {:.1}s, budget {}s", elapsed.as_secs_f64(), self.budget.as_secs()));
        }
        let status = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut line = format!(
            "acceptance criterion {} [{status}] {} ({:.1}s)",
            self.id,
            self.name,
            elapsed.as_secs_f64()
        );
        for n in &self.notes {
            line.push_str(&format!("\n    {n}"));
        }
        for f in &self.failures {
            line.push_str(&format!("\n    failed: {f}"));
        }
        // Written to the raw handle so the line survives output capture.
        let _ = writeln!(std::io::stderr(), "{line}");
        assert!(self.failures.is_empty(), "{line}");
    }
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn toy_encoder(seed: u64, max_text_len: usize) -> (ParamStore, DualEncoder) {
    let cfg = EncoderConfig {
        depth: 2,
        width: 8,
        heads: 2,
        vocab_size: 24,
        max_text_len,
        image_grid: [2, 2],
        patch_size: 2,
        mlp_ratio: 2,
        special_ids: SpecialIds::default(),
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = DualEncoder::new(cfg, &mut store, &mut rng).unwrap();
    (store, enc)
}

fn random_caption(rng: &mut impl Rng, max_len: usize, min_words: usize) -> TokenSequence {
    let n = rng.random_range(min_words..=max_len - 2);
    let words: Vec<u32> = (0..n).map(|_| rng.random_range(4..24)).collect();
    TokenSequence::from_content(&words, &SpecialIds::default(), max_len).unwrap()
}

fn random_image(rng: &mut impl Rng, enc: &DualEncoder) -> ImagePatchGrid {
    let [r, c] = enc.config.image_grid;
    let data = (0..r * c * enc.config.patch_dim()).map(|_| rng.random_range(0.0..1.0)).collect();
    ImagePatchGrid::new(r, c, enc.config.patch_dim(), data).unwrap()
}

#[test]
fn criterion_1_gradient_probe_matches_finite_differences() {
    let _guard = serial();
    let mut v = Verdict::new(1, "intermediate gradients vs central differences", 60);
    let (store, enc) = toy_encoder(17, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let texts: Vec<TokenSequence> = (0..3).map(|_| random_caption(&mut rng, 5, 1)).collect();
    let images: Vec<ImagePatchGrid> = (0..3).map(|_| random_image(&mut rng, &enc)).collect();
    let t: Vec<&TokenSequence> = texts.iter().collect();
    let i: Vec<&ImagePatchGrid> = images.iter().collect();
    let probes = enc.probe_intermediate_gradients(&store, &t, &i, &[0, 1]).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (b, probe) in probes.iter().enumerate() {
        for (li, &layer) in probe.layers.iter().enumerate() {
            for coord in 0..enc.config.width {
                let at = |delta: f64| {
                    let p = Perturbation {
                        layer,
                        sample: b,
                        row: texts[b].eos_position(),
                        coord,
                        delta,
                    };
                    enc.matched_similarities(&store, &t, &i, Some(&p)).unwrap()[b]
                };
                let numeric = (at(h) - at(-h)) / (2.0 * h);
                let analytic = probe.g[li][coord];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
    }
    v.note(format!("max relative error {worst:.2e} over 3 samples x 2 layers x 8 coordinates"));
    v.check(worst < 1e-4, format!("max relative error {worst:e} >= 1e-4"));
    v.finish();
}

#[test]
fn criterion_2_gass_invariants_on_random_traces() {
    let _guard = serial();
    let mut v = Verdict::new(2, "score invariants over 1000 traces", 10);
    let cfg = GassConfig::for_depth(2);
    let layers = cfg.layer_indices(2);
    let mut traces = 0usize;
    let (mut w_err, mut a_err, mut min_s, mut s_lo, mut s_hi): (f64, f64, f64, f64, f64) =
        (0.0, 0.0, f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut model_seed = 0;
    while traces < 1000 {
        let (store, enc) = toy_encoder(100 + model_seed, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
        model_seed += 1;
        let texts: Vec<TokenSequence> = (0..10).map(|_| random_caption(&mut rng, 12, 1)).collect();
        let images: Vec<ImagePatchGrid> = (0..10).map(|_| random_image(&mut rng, &enc)).collect();
        let t: Vec<&TokenSequence> = texts.iter().collect();
        let i: Vec<&ImagePatchGrid> = images.iter().collect();
        let probe = enc.probe(&store, &t, &i, &layers, 1.0).unwrap();
        for (b, seq) in texts.iter().enumerate() {
            let mut s_g = Vec::new();
            let mut s_a = Vec::new();
            for (trace, g) in probe.traces[b].iter().zip(&probe.probes[b].g) {
                let ls = layer_scores(trace, g, seq.eos_position(), &cfg.scales).unwrap();
                w_err = w_err.max((ls.w.iter().sum::<f64>() - 1.0).abs());
                let a = attention_score(&trace.attn, seq.eos_position()).unwrap();
                a_err = a_err.max((a.iter().sum::<f64>() - 1.0).abs());
                s_g.push(ls.s_g);
                s_a.push(ls.s_a);
                traces += 1;
            }
            let fused = fuse_scores(&s_g, &s_a, cfg.layers).unwrap();
            min_s = fused.iter().copied().fold(min_s, f64::min);
            let mut padded = fused.clone();
            padded.resize(seq.ids().len(), 0.0);
            let mask: Vec<bool> = (0..seq.ids().len()).map(|p| !seq.is_protected(p)).collect();
            for x in normalize_scores(&padded, &mask) {
                s_lo = s_lo.min(x);
                s_hi = s_hi.max(x);
            }
        }
    }
    v.note(format!(
        "{traces} traces: max |sum w - 1| {w_err:.1e}, max |sum s_a - 1| {a_err:.1e}, min S {min_s:.2e}, s in [{s_lo}, {s_hi}]"
    ));
    v.check(w_err <= 1e-5, "spatial weights do not sum to one");
    v.check(a_err <= 1e-5, "attention scores do not sum to one");
    v.check(min_s >= 0.0, "negative fused score");
    v.check(s_lo >= 0.0 && s_hi <= 1.0, "normalized score outside [0, 1]");
    v.finish();
}

#[test]
fn criterion_3_masking_laws_match_empirical_rates() {
    let _guard = serial();
    let mut v = Verdict::new(3, "masking-law conformance", 30);
    let cfg = MaskConfig::default();
    let specials = SpecialIds::default();
    let grid: Vec<f64> = (0..20).map(|k| k as f64 / 19.0).collect();
    let seq = TokenSequence::from_content(&[7; 20], &specials, 22).unwrap();
    let mut normalized = vec![0.0; seq.ids().len()];
    for (k, &s) in grid.iter().enumerate() {
        normalized[k + 1] = s;
    }
    let scores = GassScores {
        fused: normalized.clone(),
        normalized,
    };
    let draws = 100_000usize;
    let mut noise = [0usize; 20];
    let mut informative = [0usize; 20];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..draws {
        let plan = sample_mask_with(&scores, &seq, &cfg, &mut rng).unwrap();
        for &p in plan.noise_positions.iter().chain(&plan.double_selected) {
            noise[p - 1] += 1;
        }
        for &p in &plan.informative_positions {
            informative[p - 1] += 1;
        }
    }
    let mut worst_z: f64 = 0.0;
    for (k, &s) in grid.iter().enumerate() {
        for (count, p) in [
            (noise[k], noise_mask_prob(s, &cfg)),
            (informative[k], informative_mask_prob(s, &cfg)),
        ] {
            let rate = count as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let z = (rate - p).abs() / se;
            worst_z = worst_z.max(z);
            v.check(z <= 3.0, format!("s = {s:.3}: rate {rate:.5} vs {p:.5} ({z:.2} SE)"));
        }
    }
    let mid_n = (noise_mask_prob(1.0 - cfg.gamma, &cfg) - cfg.alpha_n / 2.0).abs();
    let mid_i = (informative_mask_prob(cfg.gamma, &cfg) - cfg.alpha_i / 2.0).abs();
    v.note(format!(
        "20 grid points x 2 laws x 1e5 draws: worst deviation {worst_z:.2} SE; midpoint errors {mid_n:.1e}, {mid_i:.1e}"
    ));
    v.check(mid_n <= 1e-12 && mid_i <= 1e-12, "midpoint values");
    v.finish();
}

fn desk_corpus() -> Corpus {
    Corpus::generate(&CorpusConfig::default()).unwrap()
}

fn desk_config(corpus: &Corpus, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.model = cfg.model.with_vocab_size(corpus.manifest.vocab_size);
    cfg
}

#[test]
fn criterion_4_zero_masking_equals_the_baseline() {
    let _guard = serial();
    let mut v = Verdict::new(4, "100 steps bit-identical to the plain matching baseline", 300);
    let corpus = desk_corpus();
    let train = Dataset::from_corpus(&corpus, Split::Train).unwrap();
    let mut cfg = desk_config(&corpus, 7);
    cfg.mask.alpha_n = 0.0;
    cfg.mask.alpha_i = 0.0;
    cfg.beta = 0.0;
    let schedule = cfg.schedule(train.len());
    let mut masked = TrainState::new(&cfg, train.len()).unwrap();
    let mut plain = masked.clone();
    let mut steps = 0;
    let mut epoch = 0;
    'outer: loop {
        for batch in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            if steps == 100 {
                break 'outer;
            }
            let lr = schedule.lr(masked.step);
            let a = train_step(&mut masked, &train, &batch, &cfg, lr).unwrap();
            let b = baseline_step(&mut plain, &train, &batch, &cfg, lr).unwrap();
            v.check(a.report == b, format!("step {steps}: loss reports differ"));
            steps += 1;
        }
        epoch += 1;
    }
    let same = masked.model.params.ids().all(|id| {
        let (x, y) = (masked.model.params.get(id), plain.model.params.get(id));
        x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    v.check(same, "parameters differ after 100 steps");
    v.check(masked.adam == plain.adam, "optimizer state differs after 100 steps");
    v.note(format!("{steps} steps, final loss {:.6}", plain_loss(&cfg, &masked, &train)));
    v.finish();
}

fn plain_loss(cfg: &TrainConfig, st: &TrainState, data: &Dataset) -> f64 {
    let batch: Vec<usize> = (0..cfg.batch_size.min(data.len())).collect();
    let mut copy = st.clone();
    baseline_step(&mut copy, data, &batch, cfg, 0.0).unwrap().l_sdm
}

fn brute_sdm(v: &Mat, t: &Mat, ids_v: &[usize], ids_t: &[usize], tau: f64, eps: f64) -> (f64, f64) {
    let unit = |m: &Mat| -> Vec<Vec<f64>> {
        m.rows()
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect()
    };
    let (v, t) = (unit(v), unit(t));
    let one_way = |a: &[Vec<f64>], b: &[Vec<f64>], ia: &[usize], ib: &[usize]| {
        let mut total = 0.0;
        for i in 0..a.len() {
            let logits: Vec<f64> = (0..b.len())
                .map(|j| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>() / tau)
                .collect();
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            let positives = ib.iter().filter(|&&l| l == ia[i]).count() as f64;
            for j in 0..b.len() {
                let p = logits[j].exp() / denom;
                let q = if ib[j] == ia[i] { 1.0 / positives } else { 0.0 };
                total += p * (p / (q + eps)).ln();
            }
        }
        total / a.len() as f64
    };
    (one_way(&v, &t, ids_v, ids_t), one_way(&t, &v, ids_t, ids_v))
}

fn brute_mtp(logits: &Mat, targets: &[u32], conventional: bool) -> f64 {
    let mut total = 0.0;
    for (j, &y) in targets.iter().enumerate() {
        let row = logits.row(j);
        let denom: f64 = row.iter().map(|z| z.exp()).sum();
        total -= (row[y as usize].exp() / denom).ln();
    }
    let norm = if conventional {
        targets.len()
    } else {
        targets.len() * logits.ncols()
    };
    total / norm as f64
}

fn brute_rank_k(scores: &Mat, rel: &Array2<bool>, k: usize) -> f64 {
    let mut hits = 0;
    for q in 0..scores.nrows() {
        let better_relevant = (0..scores.ncols()).filter(|&j| rel[[q, j]]).map(|j| {
            (0..scores.ncols())
                .filter(|&o| scores[[q, o]] > scores[[q, j]] || (scores[[q, o]] == scores[[q, j]] && o < j))
                .count()
        });
        if better_relevant.min().unwrap() < k {
            hits += 1;
        }
    }
    hits as f64 / scores.nrows() as f64
}

fn brute_ap(scores: &Mat, rel: &Array2<bool>, q: usize) -> f64 {
    let g = scores.ncols();
    let rank_of = |j: usize| {
        (0..g)
            .filter(|&o| scores[[q, o]] > scores[[q, j]] || (scores[[q, o]] == scores[[q, j]] && o < j))
            .count()
            + 1
    };
    let relevant: Vec<usize> = (0..g).filter(|&j| rel[[q, j]]).collect();
    let mut sum = 0.0;
    for &j in &relevant {
        let r = rank_of(j);
        let above = relevant.iter().filter(|&&o| rank_of(o) <= r).count();
        sum += above as f64 / r as f64;
    }
    sum / relevant.len() as f64
}

#[test]
fn criterion_5_loss_and_metric_oracles() {
    let _guard = serial();
    let mut v = Verdict::new(5, "loss and metric oracles", 60);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let sdm_cfg = SdmConfig::default();
    let (mut sdm_err, mut mtp_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let b = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let vmat = Mat::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let tmat = Mat::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let ids: Vec<usize> = (0..b).map(|_| rng.random_range(0..b.max(2) - 1)).collect();
        let labels = MatchLabels::new(ids.iter().map(|i| format!("p{i}")));
        let (i2t, t2i) = brute_sdm(&vmat, &tmat, &ids, &ids, sdm_cfg.tau, sdm_cfg.epsilon);
        let dists = SdmDistributions::new(&vmat, &tmat, &labels, &labels, sdm_cfg.tau).unwrap();
        let l = sdm_loss(&dists, sdm_cfg.epsilon).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (vn, tn) = (g.leaf(vmat.clone()), g.leaf(tmat.clone()));
        let nodes = sdm_graph(&mut g, vn, tn, &labels, &labels, &sdm_cfg).unwrap();
        for (got, want) in [
            (l.l_i2t, i2t),
            (l.l_t2i, t2i),
            (l.l_sdm, i2t + t2i),
            (g.scalar(nodes.l_i2t), i2t),
            (g.scalar(nodes.l_t2i), t2i),
        ] {
            sdm_err = sdm_err.max((got - want).abs() / want.abs().max(1.0));
        }

        let vocab = rng.random_range(2..=64);
        let m = rng.random_range(1..=8);
        let logits = Mat::from_shape_fn((m, vocab), |_| rng.random_range(-4.0..4.0));
        let targets: Vec<u32> = (0..m).map(|_| rng.random_range(0..vocab as u32)).collect();
        for conventional in [false, true] {
            let got = mtp_loss(&logits, &targets, conventional).unwrap();
            let want = brute_mtp(&logits, &targets, conventional);
            mtp_err = mtp_err.max((got - want).abs() / want.abs().max(1.0));
        }
        let mut g = Graph::new(&store);
        let z = g.leaf(logits.clone());
        let ce = g
            .cross_entropy(z, targets.iter().map(|&t| t as usize).collect(), (m * vocab) as f64)
            .unwrap();
        let want = brute_mtp(&logits, &targets, false);
        mtp_err = mtp_err.max((g.scalar(ce) - want).abs() / want.abs().max(1.0));
    }
    v.check(sdm_err <= 1e-9, format!("matching loss error {sdm_err:e}"));
    v.check(mtp_err <= 1e-9, format!("token prediction loss error {mtp_err:e}"));

    let (mut rank_mismatch, mut ap_err) = (0usize, 0.0f64);
    for _ in 0..50 {
        let q = rng.random_range(1..=12);
        let gal = rng.random_range(1..=20);
        let coarse = rng.random_bool(0.5);
        let scores = Mat::from_shape_fn((q, gal), |_| {
            if coarse {
                rng.random_range(0..4) as f64 / 4.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let mut rel = Array2::from_shape_fn((q, gal), |_| rng.random_bool(0.2));
        for (i, mut row) in rel.axis_iter_mut(Axis(0)).enumerate() {
            if !row.iter().any(|&r| r) {
                row[i % gal] = true;
            }
        }
        let m = ScoreMatrix::new(scores.clone(), rel.clone()).unwrap();
        for k in 1..=gal {
            if rank_k(&m, k).unwrap() != brute_rank_k(&scores, &rel, k) {
                rank_mismatch += 1;
            }
        }
        let brute_map = (0..q).map(|i| brute_ap(&scores, &rel, i)).sum::<f64>() / q as f64;
        ap_err = ap_err.max((mean_average_precision(&m) - brute_map).abs());
        for i in 0..q {
            ap_err = ap_err.max((average_precision(&m, i) - brute_ap(&scores, &rel, i)).abs());
        }
    }
    v.check(rank_mismatch == 0, format!("{rank_mismatch} rank-k mismatches"));
    v.check(ap_err <= 1e-12, format!("mAP error {ap_err:e}"));
    v.note(format!(
        "100 loss batches: matching error {sdm_err:.1e}, prediction error {mtp_err:.1e}; 50 score matrices: {rank_mismatch} rank-k mismatches, mAP error {ap_err:.1e}"
    ));
    v.finish();
}

struct DeskRun {
    first_total: f64,
    last_total: f64,
    rank1: f64,
    noise_mean: f64,
    clean_mean: f64,
}

fn desk_run(corpus: &Corpus, seed: u64) -> DeskRun {
    let train = Dataset::from_corpus(corpus, Split::Train).unwrap();
    let test = Dataset::from_corpus(corpus, Split::Test).unwrap();
    let cfg = desk_config(corpus, seed);
    let mut st = TrainState::new(&cfg, train.len()).unwrap();
    let h = fit(&mut st, &train, Some(&test), &cfg, &FitOptions::default()).unwrap();
    let first = h.epochs.first().unwrap();
    let last = h.epochs.last().unwrap();
    let sep = last.separation.expect("noisy training split");
    DeskRun {
        first_total: first.mean_total,
        last_total: last.mean_total,
        rank1: last.eval.as_ref().unwrap().rank1,
        noise_mean: sep.noise_mean,
        clean_mean: sep.clean_mean,
    }
}

#[test]
fn criterion_6_desk_training() {
    let _guard = serial();
    let seeds = [0u64, 1, 2];
    let mut v = Verdict::new(6, "desk-scale training on the default corpus, 3 seeds", 30 * 60 * seeds.len() as u64);
    let corpus = desk_corpus();
    let chance = 1.0 / corpus.test.len() as f64;
    for seed in seeds {
        let started = Instant::now();
        let r = desk_run(&corpus, seed);
        v.note(format!(
            "seed {seed}: loss {:.4} -> {:.4} (ratio {:.3}), rank-1 {:.3} ({:.0}x chance), noise score {:.4} vs clean {:.4}, {:.0}s",
            r.first_total,
            r.last_total,
            r.last_total / r.first_total,
            r.rank1,
            r.rank1 / chance,
            r.noise_mean,
            r.clean_mean,
            started.elapsed().as_secs_f64()
        ));
        v.check(r.last_total < 0.5 * r.first_total, format!("seed {seed}: (a) final loss not below half the first"));
        v.check(r.rank1 >= 20.0 * chance, format!("seed {seed}: (b) rank-1 below 20x chance"));
        v.check(r.noise_mean < r.clean_mean, format!("seed {seed}: (c) noise tokens do not score below clean tokens"));
        v.check(started.elapsed() < Duration::from_secs(30 * 60), format!("seed {seed}: over 30 minutes"));
    }
    v.finish();
}

#[test]
fn criterion_7_curation_golden_files() {
    let _guard = serial();
    let mut v = Verdict::new(7, "curation golden audit and deterministic template selection", 10);
    let records: Vec<CropRecord> = jsonl::read(&fixture("crops.jsonl")).unwrap();
    let golden = std::fs::read_to_string(fixture("crops_audit.golden.jsonl")).unwrap();
    let a = filter_records(&records, &FilterCriteria::default()).unwrap();
    let b = filter_records(&records, &FilterCriteria::default()).unwrap();
    let text = jsonl::to_string(&a.audit).unwrap();
    v.check(records.len() == 50, "fixture size");
    v.check(text == golden, "audit differs from the golden file");
    v.check(text == jsonl::to_string(&b.audit).unwrap(), "audit differs between runs");

    let templates: Vec<TemplateRecord> = jsonl::read(&fixture("templates.jsonl")).unwrap();
    v.check(templates.len() == 100, "template fixture size");
    let mut representatives = 0;
    for seed in [0u64, 1, 2, 3] {
        let cfg = KMeansConfig::new(5, seed);
        let c1 = cluster_templates(&templates, &cfg).unwrap();
        let c2 = cluster_templates(&templates, &cfg).unwrap();
        v.check(c1 == c2, format!("seed {seed}: clustering not deterministic"));
        let bank = select_templates(&templates, &c1, 5, seed).unwrap();
        v.check(bank == select_templates(&templates, &c2, 5, seed).unwrap(), format!("seed {seed}: selection not deterministic"));
        for sel in &bank.clusters {
            let centroid = &c1.centroids[sel.cluster];
            let cn = centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cosine = |e: &[f64]| {
                let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                e.iter().zip(centroid).map(|(x, y)| x * y).sum::<f64>() / (en * cn)
            };
            let best = templates
                .iter()
                .zip(&c1.assignments)
                .filter(|(_, &a)| a == sel.cluster)
                .map(|(t, _)| cosine(&t.embedding))
                .fold(f64::NEG_INFINITY, f64::max);
            let rep: Vec<_> = sel.templates.iter().filter(|t| t.role == SelectionRole::Representative).collect();
            v.check(rep.len() == 1, "one representative per cluster");
            let rep_rec = templates.iter().find(|t| t.template_id == rep[0].template_id).unwrap();
            v.check(
                cosine(&rep_rec.embedding) >= best - 1e-12,
                format!("seed {seed} cluster {}: representative is not the closest member", sel.cluster),
            );
            representatives += 1;
        }
    }
    v.note(format!(
        "{} of 50 crops accepted, audit matches golden bytes; {representatives} clusters checked across 4 seeds",
        a.accepted.len()
    ));
    v.finish();
}

#[test]
fn criterion_8_checkpoint_round_trip() {
    let _guard = serial();
    let mut v = Verdict::new(8, "interrupt at epoch 3 of 6 and resume", 600);
    let corpus = desk_corpus();
    let train = Dataset::from_corpus(&corpus, Split::Train).unwrap();
    let test = Dataset::from_corpus(&corpus, Split::Test).unwrap();
    let mut cfg = desk_config(&corpus, 11);
    cfg.epochs = 6;
    let dir = tempfile::tempdir().unwrap();
    let opts = |name: &str, stop: Option<usize>| FitOptions {
        checkpoint_dir: Some(dir.path().join(name).join("checkpoints")),
        metrics_path: Some(dir.path().join(name).join("metrics.jsonl")),
        stop_after_epoch: stop,
        eval_every_epoch: true,
        ..FitOptions::default()
    };
    let mut full = TrainState::new(&cfg, train.len()).unwrap();
    let want = fit(&mut full, &train, Some(&test), &cfg, &opts("full", None)).unwrap();

    let mut part = TrainState::new(&cfg, train.len()).unwrap();
    fit(&mut part, &train, Some(&test), &cfg, &opts("part", Some(3))).unwrap();
    drop(part);
    let latest = checkpoint::latest(&dir.path().join("part/checkpoints")).unwrap().unwrap();
    let (cfg2, mut resumed, manifest) = checkpoint::load(&latest).unwrap();
    v.check(manifest.epoch == 3, format!("latest checkpoint is epoch {}", manifest.epoch));
    let got = fit(&mut resumed, &train, Some(&test), &cfg2, &opts("part", None)).unwrap();

    v.check(got == want, "metrics history differs");
    v.check(resumed.model.params == full.model.params, "final parameters differ");
    let log = |name: &str| std::fs::read(dir.path().join(name).join("metrics.jsonl")).unwrap();
    v.check(log("full") == log("part"), "metrics logs differ");
    let blob = |name: &str| std::fs::read(dir.path().join(name).join("checkpoints/epoch-0006/params.bin")).unwrap();
    v.check(blob("full") == blob("part"), "final checkpoint blobs differ");
    v.note(format!(
        "{} step records and {} epoch records identical after resuming at step {}",
        got.steps.len(),
        got.epochs.len(),
        manifest.step
    ));
    v.finish();
}
