//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines are always printed.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use s2r2_core::alignment::{segment_drift, solve_exact, solve_sinkhorn, CostMatrix, SinkhornParams, Solver};
use s2r2_core::commands::{
    attention_diagnostics, cmd_perturb, cmd_report, cmd_train, score_outputs, PerturbJob, TextRecord, TrainJob,
};
use s2r2_core::fsutil::write_jsonl;
use s2r2_core::gradcheck::{run_gradcheck, GradcheckConfig};
use s2r2_core::losses::{LoraAdapter, Projection, Site};
use s2r2_core::metrics::{e_risk, edit_rate, rouge_l};
use s2r2_core::numerics::{frobenius_norm, Distribution, Matrix};
use s2r2_core::perturb::{PerturbConfig, PerturbKind};
use s2r2_core::report::RATIO_FLAG_THRESHOLD;
use s2r2_core::synthetic;
use s2r2_core::toymodel::{init_model, LoraNorms, Model, ModelConfig};
use s2r2_core::trainer::{
    drift_alignment, mean_clean_ce, mean_heldout_drift, pretrain_base, reference_segments, target_tokens, train_loop, train_loop_from,
    write_train_log, TrainConfig, TrainContext, TrainMode,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1 ------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let cfg = GradcheckConfig::default();
    ensure(cfg.model.d_model == 8 && cfg.model.n_layers == 1 && cfg.model.n_heads == 2 && cfg.model.lora_rank == 1, "toy dims")?;
    let rep = run_gradcheck(&cfg).map_err(e2s)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = rep.terms.iter().map(|t| t.worst_rel_err).fold(0.0, f64::max);
    let detail: Vec<String> = rep.terms.iter().map(|t| format!("{}={:.1e}", t.term, t.worst_rel_err)).collect();
    ensure(rep.pass && worst < 1e-5, format!("failed terms {:?}: {}", rep.failed_terms(), detail.join(" ")))?;
    ensure(secs < 300.0, format!("took {secs:.1}s"))?;
    Ok(format!("worst rel err {worst:.2e} < 1e-5 over {}, {secs:.1}s", detail.join(" ")))
}

// 2 ------------------------------------------------------------------------

fn random_feasible_plan(rng: &mut ChaCha8Rng, mu: &[f64], nu: &[f64]) -> Matrix {
    let (m, n) = (mu.len(), nu.len());
    let mut cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    for k in (1..cells.len()).rev() {
        cells.swap(k, rng.random_range(0..=k));
    }
    let (mut r, mut c) = (mu.to_vec(), nu.to_vec());
    let mut greedy = Matrix::zeros(m, n);
    for (i, j) in cells {
        let x = r[i].min(c[j]);
        greedy[(i, j)] = x;
        r[i] -= x;
        c[j] -= x;
    }
    // mix a random vertex with the independent coupling
    let w: f64 = rng.random_range(0.0..1.0);
    Matrix::from_fn(m, n, |i, j| w * greedy[(i, j)] + (1.0 - w) * mu[i] * nu[j])
}

fn ot_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_gap, mut worst_sum, mut worst_beat) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for inst in 0..200 {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let c = CostMatrix(Matrix::from_fn(m, n, |_, _| rng.random_range(0.0..2.0)));
        let mu = Distribution::normalized((0..m).map(|_| rng.random_range(0.05..1.0)).collect()).map_err(e2s)?;
        let nu = Distribution::normalized((0..n).map(|_| rng.random_range(0.05..1.0)).collect()).map_err(e2s)?;
        let ex = solve_exact(&c, &mu, &nu).map_err(e2s)?;
        let sk = solve_sinkhorn(&c, &mu, &nu, SinkhornParams { epsilon: 1e-3, ..Default::default() }).map_err(e2s)?;
        let gap = (sk.objective - ex.objective).abs();
        worst_gap = worst_gap.max(gap);
        let d = segment_drift(&ex, &c).map_err(e2s)?;
        worst_sum = worst_sum.max((d.0.iter().sum::<f64>() - ex.objective).abs());
        for _ in 0..1000 {
            let t = random_feasible_plan(&mut rng, mu.as_slice(), nu.as_slice());
            let obj: f64 = t.data().iter().zip(c.0.data()).map(|(a, b)| a * b).sum();
            worst_beat = worst_beat.max(ex.objective - obj);
        }
        ensure(gap <= 1e-3, format!("instance {inst}: sinkhorn gap {gap:.2e}"))?;
    }
    ensure(worst_beat <= 1e-12, format!("a random plan beat the exact objective by {worst_beat:.2e}"))?;
    ensure(worst_sum <= 1e-12, format!("sum of drift differs from objective by {worst_sum:.2e}"))?;
    Ok(format!("200 instances: sinkhorn gap {worst_gap:.1e} <= 1e-3, no random plan below exact beyond {worst_beat:.1e}, |sum d - obj| {worst_sum:.1e}"))
}

// 3 ------------------------------------------------------------------------

fn zero_perturbation() -> Outcome {
    let model = init_model(ModelConfig { seed: 4, init_std: 0.2, ..Default::default() }).map_err(e2s)?;
    let beta = 10.0;
    let cfg = PerturbConfig { typo_rate: 0.0, delete_rate: 0.0, synonym_rate: 0.0, ..Default::default() };
    let mut worst_d = 0.0f64;
    let mut worst_floor = 0.0f64;
    let mut worst_r = 0.0f64;
    let mut worst_metric = 0.0f64;
    for ex in synthetic::summary_task(8, 3) {
        for kind in [PerturbKind::Typo, PerturbKind::Delete, PerturbKind::Synonym] {
            let src_p = s2r2_core::perturb::perturb_text(&ex.src, kind, &cfg, &synthetic::lexicon(), 1);
            ensure(src_p == ex.src, "zero-rate perturbation changed the text")?;
            let tgt = target_tokens(&model, &ex.tgt);
            let fc = model.forward_teacher_forced(&model.encode(&ex.src), &tgt).map_err(e2s)?;
            let fp = model.forward_teacher_forced(&model.encode(&src_p), &tgt).map_err(e2s)?;
            let seg = reference_segments(&model, &ex.tgt).map_err(e2s)?;
            let u = seg.len();
            let mu = Distribution::uniform(u).map_err(e2s)?;
            let (al, _, _) = drift_alignment(&fc, &fp, &seg, &mu, Solver::Exact, SinkhornParams::default(), beta).map_err(e2s)?;
            worst_d = worst_d.max(al.drift.0.iter().fold(0.0, |a, b| a.max(b.abs())));
            worst_floor = worst_floor.max((al.loss - (u as f64).ln() / beta).abs());
            let diag = attention_diagnostics(&model, &ex.id, &ex.src, &src_p, &ex.tgt).map_err(e2s)?.ok_or("no diagnostics")?;
            worst_r = worst_r.max(diag.iter().flat_map(|d| d.r.iter()).fold(0.0, |a, b| a.max(*b)));
            let out = model.generate_text(&ex.src, 48).map_err(e2s)?;
            let out_p = model.generate_text(&src_p, 48).map_err(e2s)?;
            // reference = clean output so PDR is defined
            let rec = score_outputs(&model, &ex.id, kind.label(), &out, &out_p, &out);
            let pdr = rec.pdr.ok_or("pdr undefined")?.abs();
            worst_metric = worst_metric.max(pdr).max(rec.edit_rate).max(rec.one_minus_sb).max(rec.e_risk());
        }
    }
    ensure(worst_d <= 1e-12, format!("max |d_u| {worst_d:.2e}"))?;
    ensure(worst_floor <= 1e-12, format!("L_sem off the ln(U)/beta floor by {worst_floor:.2e}"))?;
    ensure(worst_r == 0.0, format!("max r_u {worst_r:.2e}"))?;
    ensure(worst_metric <= 1e-12, format!("max per-record metric {worst_metric:.2e}"))?;
    Ok(format!("max |d_u| {worst_d:.1e}, |L_sem - ln U/beta| {worst_floor:.1e}, r_u = 0, max per-record metric {worst_metric:.1e}"))
}

// 4 ------------------------------------------------------------------------

fn norm_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (mut worst_ineq, mut worst_id) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..1000 {
        let (d_in, d_out) = (rng.random_range(1..12), rng.random_range(1..12));
        let r = rng.random_range(1..=d_in.min(d_out).min(4));
        let scale = 10f64.powf(rng.random_range(-2.0..1.0));
        let a = Matrix::from_fn(d_in, r, |_, _| scale * rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(d_out, r, |_, _| rng.random_range(-1.0..1.0));
        let ad = LoraAdapter::new(a, b, Site { layer: 0, proj: Projection::Q }).map_err(e2s)?;
        let (na, nb) = ad.norms();
        let nd = frobenius_norm(&ad.delta());
        worst_ineq = worst_ineq.max(nd - na * nb);
        let id = (nb * nb + na * na) - ((nb - na).powi(2) + 2.0 * na * nb);
        worst_id = worst_id.max(id.abs());
    }
    ensure(worst_ineq <= 1e-10, format!("|BA^T| exceeds |A||B| by {worst_ineq:.2e}"))?;
    ensure(worst_id <= 1e-10, format!("square identity off by {worst_id:.2e}"))?;
    Ok(format!("1000 pairs: max(|BA^T| - |A||B|) {worst_ineq:.1e} <= 1e-10, identity err {worst_id:.1e}"))
}

// 5 ------------------------------------------------------------------------

fn attention_invariants() -> Outcome {
    use s2r2_core::attn_diag::{decompose_shift, realloc_js, SegmentContext};
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut worst_row, mut worst_res, mut r_lo, mut r_hi) = (0.0f64, 0.0f64, f64::INFINITY, 0.0f64);
    let causal = |rng: &mut ChaCha8Rng, n: usize| {
        let mut a = Matrix::from_fn(n, n, |i, j| if j <= i { rng.random_range(0.0..1.0f64).powi(4) + 1e-9 } else { 0.0 });
        for i in 0..n {
            let s: f64 = a.row(i).iter().sum();
            a.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        a
    };
    for _ in 0..300 {
        let n_src = rng.random_range(1..6);
        let n = n_src + rng.random_range(2..8);
        let src: Vec<_> = (0..n_src).map(|j| j..j + 1).collect();
        let cut = rng.random_range(n_src + 1..n);
        let out = [n_src..cut, cut..n];
        let (a, b) = (causal(&mut rng, n), causal(&mut rng, n));
        let v1 = Matrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
        let v2 = Matrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
        let cc = SegmentContext::from_tokens(&a, &v1, &out, &src, 0, 0).map_err(e2s)?;
        let cp = SegmentContext::from_tokens(&b, &v2, &out, &src, 0, 0).map_err(e2s)?;
        for c in [&cc.attention.c, &cp.attention.c] {
            for u in 0..c.rows() {
                worst_row = worst_row.max((c.row(u).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let rep = realloc_js(&cc.attention, &cp.attention).map_err(e2s)?;
        for &r in &rep.r {
            r_lo = r_lo.min(r);
            r_hi = r_hi.max(r);
        }
        let dec = decompose_shift(&cc, &cp).map_err(e2s)?;
        worst_res = worst_res.max(dec.residual.iter().copied().fold(0.0, f64::max));
    }
    ensure(worst_row <= 1e-9, format!("row sum off by {worst_row:.2e}"))?;
    ensure(r_lo >= 0.0 && r_hi <= std::f64::consts::LN_2, format!("r outside [0, ln 2]: [{r_lo}, {r_hi}]"))?;
    ensure(worst_res < 1e-10, format!("singleton residual {worst_res:.2e}"))?;
    Ok(format!("row sums within {worst_row:.1e}, r in [{r_lo:.3}, {r_hi:.3}] c [0, ln 2], singleton residual {worst_res:.1e}"))
}

// 6 ------------------------------------------------------------------------

fn qualitative_trend() -> Outcome {
    let t = Instant::now();
    let mut base = init_model(ModelConfig { seed: 1, init_std: 0.1, ..Default::default() }).map_err(e2s)?;
    pretrain_base(&mut base, &synthetic::copy_task(256, 11), 1500, 0.1).map_err(e2s)?;
    let train = synthetic::summary_task(64, 12);
    let held = synthetic::summary_task(32, 13);
    let ctx = TrainContext { lexicon: synthetic::lexicon(), ..Default::default() };
    let threshold = 2.0;
    let mut res = Vec::new();
    for mode in [TrainMode::CeOnly, TrainMode::S2r2, TrainMode::SeqKlBaseline] {
        let cfg = TrainConfig {
            steps: 2000,
            learning_rate: 0.05,
            mode,
            log_every: 10,
            seed: 5,
            lambdas: s2r2_core::losses::Lambdas { sem: 2.0, stab: 0.05, bal: 0.0 },
            perturb: PerturbConfig { kinds: vec![PerturbKind::Typo, PerturbKind::Delete, PerturbKind::Synonym], ..Default::default() },
            stab_projections: Projection::ALL.to_vec(),
            early_stop_ce: Some(threshold),
            ..Default::default()
        };
        let out = train_loop(base.clone(), &train, &cfg, &ctx).map_err(e2s)?;
        ensure(out.early_stopped, format!("{mode} never reached clean CE {threshold}"))?;
        let ce = mean_clean_ce(&out.model, &train).map_err(e2s)?;
        let prod = out.rows.last().ok_or("no log rows")?.prod_f_sum;
        let drift = mean_heldout_drift(&out.model, &held, &cfg, &ctx, 99).map_err(e2s)?;
        res.push((mode, out.last_step, ce, prod, drift));
    }
    let secs = t.elapsed().as_secs_f64();
    let summary: Vec<String> =
        res.iter().map(|(m, s, ce, p, d)| format!("{m}@{s} ce {ce:.3} prod {p:.3} drift {d:.4}")).collect();
    let (ce_only, s2r2, seq_kl) = (res[0], res[1], res[2]);
    ensure(s2r2.3 < ce_only.3 && s2r2.3 < seq_kl.3, format!("ProdF_sum ordering fails: {}", summary.join("; ")))?;
    ensure(s2r2.4 < ce_only.4, format!("held-out drift ordering fails: {}", summary.join("; ")))?;
    ensure(secs < 1800.0, format!("took {secs:.0}s"))?;
    Ok(format!("{} ({secs:.0}s)", summary.join("; ")))
}

// 7 ------------------------------------------------------------------------

fn lcs_oracle(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t[a.len()][b.len()]
}

fn lev_oracle(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + usize::from(a[i - 1] != b[j - 1]));
        }
        prev = cur;
    }
    prev[b.len()]
}

fn metric_units() -> Outcome {
    let (c, r) = ("a b c d", "a c d");
    let (cw, rw): (Vec<&str>, Vec<&str>) = (c.split(' ').collect(), r.split(' ').collect());
    let l = lcs_oracle(&cw, &rw) as f64;
    let (p, rc) = (l / cw.len() as f64, l / rw.len() as f64);
    let f = 2.0 * p * rc / (p + rc);
    let got = rouge_l(c, r);
    ensure((got - f).abs() < 1e-9 && (got - 0.857).abs() < 5e-4, format!("rouge_l {got} vs oracle {f}"))?;
    let (x, y): (Vec<&str>, Vec<&str>) = ("a b c".split(' ').collect(), "a b d".split(' ').collect());
    let ed_oracle = lev_oracle(&x, &y) as f64 / x.len().max(y.len()) as f64;
    let ed = edit_rate("a b c", "a b d");
    ensure((ed - ed_oracle).abs() < 1e-9 && (ed - 1.0 / 3.0).abs() < 1e-9, format!("edit_rate {ed}"))?;
    let er = e_risk(0.2, 0.1, 0.4);
    let er_oracle = 0.8 * 0.2 + 0.1 * 0.1 + 0.1 * 0.4;
    ensure((er - er_oracle).abs() < 1e-9 && (er - 0.21).abs() < 1e-9, format!("e_risk {er}"))?;
    Ok(format!("rouge_l {got:.6} (oracle {f:.6}), edit_rate {ed:.6}, e_risk {er:.6}"))
}

// 8 ------------------------------------------------------------------------

fn tree_digest(dir: &Path) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(e2s)? {
            let p = e.map_err(e2s)?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run_manifest.json") {
                let bytes = fs::read(&p).map_err(e2s)?;
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), hex::encode(Sha256::digest(&bytes))));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// sha256 of `perturbed.jsonl` for the fixed input below; pinned so any
/// platform or toolchain drift in the draw order shows up here.
const PERTURB_GOLDEN: &str = "8ff6f3b098cfb58d9f81868027cde6fa52afe37c374316886745dd9ce2a1edc4";

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let data = tmp.path().join("train.jsonl");
    write_jsonl(&data, &synthetic::summary_task(6, 8)).map_err(e2s)?;
    let job = TrainJob {
        model: ModelConfig { d_model: 16, d_ff: 32, max_seq: 96, seed: 3, ..Default::default() },
        train: TrainConfig { steps: 12, log_every: 3, checkpoint_every: Some(6), seed: 9, solver: Solver::Exact, ..Default::default() },
        ..Default::default()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        fs::create_dir_all(d).map_err(e2s)?;
        cmd_train(&data, &job, d, None).map_err(e2s)?;
    }
    let (da, db) = (tree_digest(&a)?, tree_digest(&b)?);
    ensure(da.len() >= 5, format!("expected checkpoint and log files, got {da:?}"))?;
    ensure(da == db, "train outputs differ between identical runs")?;

    let text = tmp.path().join("text.jsonl");
    let inputs: Vec<TextRecord> = synthetic::summary_task(5, 21).into_iter().map(|e| TextRecord { id: e.id, text: e.src }).collect();
    write_jsonl(&text, &inputs).map_err(e2s)?;
    let lex = tmp.path().join("lex.json");
    fs::write(&lex, r#"{"name":["called"],"city":["town","place"],"job":["work"]}"#).map_err(e2s)?;
    let pjob = PerturbJob {
        perturb: PerturbConfig { typo_rate: 0.3, delete_rate: 0.2, synonym_rate: 0.5, seed: 17, kinds: vec![PerturbKind::Typo, PerturbKind::Delete, PerturbKind::TypoDelete, PerturbKind::Synonym], preserve_segments: false },
        lexicon: Some(lex.display().to_string()),
        paraphrase_sidecar: None,
    };
    let p = tmp.path().join("p");
    fs::create_dir_all(&p).map_err(e2s)?;
    cmd_perturb(&text, &pjob, &p).map_err(e2s)?;
    let digest = hex::encode(Sha256::digest(fs::read(p.join("perturbed.jsonl")).map_err(e2s)?));
    ensure(digest == PERTURB_GOLDEN, format!("perturbed.jsonl sha256 {digest} != pinned {PERTURB_GOLDEN}"))?;
    Ok(format!("{} train artifacts bit-identical across runs; perturbed.jsonl matches pinned sha256 {}", da.len(), &digest[..12]))
}

// 9 ------------------------------------------------------------------------

fn balanced_model() -> Result<Model, String> {
    let mut m = init_model(ModelConfig { d_model: 16, d_ff: 32, max_seq: 96, seed: 6, ..Default::default() }).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for ad in &mut m.adapters {
        for v in ad.a.data_mut().iter_mut().chain(ad.b.data_mut().iter_mut()) {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    Ok(m)
}

fn ratio_monitor() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let data = synthetic::summary_task(4, 2);
    let cfg = TrainConfig { steps: 12, log_every: 1, learning_rate: 1e-4, solver: Solver::Exact, ..Default::default() };
    let ctx = TrainContext::default();

    let clean = train_loop(balanced_model()?, &data, &cfg, &ctx).map_err(e2s)?;
    // fault: blow up one site's A halfway through
    let first = train_loop_from(balanced_model()?, &data, &TrainConfig { steps: 6, ..cfg.clone() }, &ctx, 0, |_, _| Ok(())).map_err(e2s)?;
    let mut faulty = first.model;
    faulty.adapters[1].a = faulty.adapters[1].a.scaled(50.0);
    let injected = LoraNorms::of(&faulty.adapters).max_ab_ratio().ok_or("no ratio")?;
    let second = train_loop_from(faulty, &data, &cfg, &ctx, 6, |_, _| Ok(())).map_err(e2s)?;
    let rows: Vec<_> = first.rows.into_iter().chain(second.rows).collect();

    let (lc, lf) = (tmp.path().join("clean.csv"), tmp.path().join("fault.csv"));
    write_train_log(&lc, &clean.rows).map_err(e2s)?;
    write_train_log(&lf, &rows).map_err(e2s)?;
    let header = fs::read_to_string(&lf).map_err(e2s)?.lines().next().unwrap_or_default().to_string();
    ensure(header.contains("a_f_sum") && header.contains("b_f_sum"), format!("log header lacks norm sums: {header}"))?;
    let out = tmp.path().join("rep");
    fs::create_dir_all(&out).map_err(e2s)?;
    let rep = cmd_report(&[("clean".into(), lc), ("fault".into(), lf)], &out, None).map_err(e2s)?;
    let flagged: Vec<(String, usize)> = rep.flags.iter().map(|f| (f.run.clone(), f.step)).collect();
    let expected: Vec<(String, usize)> = (7..=12).map(|s| ("fault".to_string(), s)).collect();
    ensure(flagged == expected, format!("flags {flagged:?}, expected fault steps 7..=12"))?;
    ensure(fs::read_to_string(out.join("ratio_flags.csv")).map_err(e2s)?.lines().count() == 7, "ratio_flags.csv row count")?;
    Ok(format!(
        "injected ratio {injected:.0} > {RATIO_FLAG_THRESHOLD} flagged at exactly steps 7..=12 of the faulted run, clean run unflagged"
    ))
}

fn main() {
    type Check = (&'static str, fn() -> Outcome);
    let checks: [Check; 9] = [
        ("gradient suite", gradient_suite),
        ("OT correctness", ot_correctness),
        ("zero-perturbation identities", zero_perturbation),
        ("norm algebra", norm_algebra),
        ("attention invariants", attention_invariants),
        ("qualitative norm/drift trend", qualitative_trend),
        ("metric unit values", metric_units),
        ("determinism", determinism),
        ("norm-ratio monitor", ratio_monitor),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &n.to_string()) {
            continue;
        }
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
        });
        match res {
            Ok(msg) => println!("criterion {n} PASS  {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
