//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Reference values come from independent
//! scalar oracles written here, not from the library under test.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use lsvt_core::attention::{attend, multi_head, multi_head_attention, scaled_dot_product_attention, AttentionParams};
use lsvt_core::augment::{ChannelStats, ViewConfig};
use lsvt_core::data::decode_image;
use lsvt_core::distill::{
    distill_loss_on_tape, ema_update, load_checkpoint, save_checkpoint, teacher_probs, DistillConfig, TrainerState,
};
use lsvt_core::image::Image;
use lsvt_core::probe::{ce_loss, macro_metrics, roc_auc_binary, split_indices, SplitSpec};
use lsvt_core::tensor::{finite_diff_check, Tape, Tensor, Var};
use lsvt_core::vit::{extract_attention_map, ViTConfig, ViTModel};
use lsvt_core::viz::{conditional_entropies, joint_affinities, silhouette, tsne_embed, TsneConfig};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "finite-difference gradients", gradients),
        (2, "attention against scalar oracle", attention_oracle),
        (3, "teacher probabilities and EMA", teacher_and_ema),
        (4, "centering keeps teacher entropy high", centering_entropy),
        (5, "synthetic frozen-probe AUC", synthetic_probe),
        (6, "label-fraction ablation", ablation),
        (7, "metric oracles", metric_oracles),
        (8, "stratified split", stratified),
        (9, "t-SNE", tsne),
        (10, "checkpoints and reproducible stages", reproducibility),
        (11, "attention heatmaps", heatmaps),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {verdict} {name}: {detail} [{:.1}s]",
            t0.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(n);
        }
    }
    // statics are never dropped, so remove the shared run by hand
    if let Some(Ok(s)) = SMOKE.get() {
        let _ = std::fs::remove_dir_all(s.dir.path());
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn weighted_sum(tape: &mut Tape<f64>, x: Var, r: &Tensor<f64>) -> lsvt_core::Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(x, rv)?;
    Ok(tape.sum(p))
}

fn small_vit() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        depth: 2,
        d_model: 8,
        heads: 2,
        head_hidden: 12,
        proto_dim: 6,
        ..ViTConfig::tiny()
    }
}

fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(
        size,
        size,
        3,
        (0..size * size * 3).map(|_| rng.gen_range(-1.5f32..1.5)).collect(),
    )
    .unwrap()
}

// ---- 1 ----

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // five-point stencil: truncation ~h⁴, roundoff ~1e-16/h
    let h = 3e-4;
    let mut errs: BTreeMap<String, f64> = BTreeMap::new();
    let mut record = |name: &str, e: f64| {
        let slot = errs.entry(name.to_string()).or_insert(0.0);
        *slot = slot.max(e);
    };

    let a = random(vec![3, 4], &mut rng, -1.0, 1.0);
    let b = random(vec![4, 2], &mut rng, -1.0, 1.0);
    let r = random(vec![3, 2], &mut rng, -1.0, 1.0);
    let e = finite_diff_check(
        |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv)?;
            weighted_sum(t, y, &r)
        },
        &a,
        h,
    )?;
    record("matmul", e);
    let e = finite_diff_check(
        |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, x)?;
            weighted_sum(t, y, &r)
        },
        &b,
        h,
    )?;
    record("matmul", e);

    let x = random(vec![3, 5], &mut rng, -2.0, 2.0);
    let r5 = random(vec![3, 5], &mut rng, -1.0, 1.0);
    for temp in [1.0, 0.3] {
        let e = finite_diff_check(
            |t, v| {
                let s = t.softmax_rows(v, temp)?;
                weighted_sum(t, s, &r5)
            },
            &x,
            h,
        )?;
        record("softmax", e);
    }

    let x = random(vec![3, 6], &mut rng, -2.0, 2.0);
    let g = random(vec![6], &mut rng, 0.5, 1.5);
    let bias = random(vec![6], &mut rng, -0.5, 0.5);
    let r6 = random(vec![3, 6], &mut rng, -1.0, 1.0);
    let ln = |t: &mut Tape<f64>, xv: Var, gv: Var, bv: Var| -> lsvt_core::Result<Var> {
        let y = t.layer_norm(xv, gv, bv, 1e-6)?;
        weighted_sum(t, y, &r6)
    };
    let e1 = finite_diff_check(
        |t, v| {
            let (gv, bv) = (t.constant(g.clone()), t.constant(bias.clone()));
            ln(t, v, gv, bv)
        },
        &x,
        h,
    )?;
    let e2 = finite_diff_check(
        |t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(bias.clone()));
            ln(t, xv, v, bv)
        },
        &g,
        h,
    )?;
    let e3 = finite_diff_check(
        |t, v| {
            let (xv, gv) = (t.constant(x.clone()), t.constant(g.clone()));
            ln(t, xv, gv, v)
        },
        &bias,
        h,
    )?;
    record("layer_norm", e1.max(e2).max(e3));

    let x = random(vec![4, 5], &mut rng, -3.0, 3.0);
    let r = random(vec![4, 5], &mut rng, -1.0, 1.0);
    let e = finite_diff_check(
        |t, v| {
            let y = t.gelu(v);
            weighted_sum(t, y, &r)
        },
        &x,
        h,
    )?;
    record("gelu", e);

    let q = random(vec![3, 4], &mut rng, -1.0, 1.0);
    let k = random(vec![5, 4], &mut rng, -1.0, 1.0);
    let v = random(vec![5, 2], &mut rng, -1.0, 1.0);
    let r = random(vec![3, 2], &mut rng, -1.0, 1.0);
    for which in 0..3 {
        let base = [&q, &k, &v][which];
        let e = finite_diff_check(
            |t, x| {
                let mut vars = [q.clone(), k.clone(), v.clone()].map(|m| t.constant(m));
                vars[which] = x;
                let (o, _) = attend(t, vars[0], vars[1], vars[2])?;
                weighted_sum(t, o, &r)
            },
            base,
            h,
        )?;
        record("attention", e);
    }
    let params = random_attention(&mut rng, 2, 5, 3, 2);
    let xq = random(vec![3, 5], &mut rng, -1.0, 1.0);
    let xkv = random(vec![4, 5], &mut rng, -1.0, 1.0);
    let r = random(vec![3, 5], &mut rng, -1.0, 1.0);
    for target in ["attn.w_q.1", "attn.w_k.0", "attn.w_v.1", "attn.w_o"] {
        let leaf = params.map("attn", &mut |name, t| (name.to_string(), t.clone()));
        let mut value = None;
        leaf.map("", &mut |_, (name, t)| {
            if name == target {
                value = Some(t.clone());
            }
        });
        let e = finite_diff_check(
            |t, x| {
                let mut bound = params.bind(t, "attn");
                bound.visit_mut("attn", &mut |name, var| {
                    if name == target {
                        *var = x;
                    }
                });
                let (a, b) = (t.constant(xq.clone()), t.constant(xkv.clone()));
                let (o, _) = multi_head(t, a, b, &bound)?;
                weighted_sum(t, o, &r)
            },
            &value.expect("target exists"),
            h,
        )?;
        record("attention", e);
    }

    // init-scale weights give near-uniform attention and gradients near
    // zero for the query and key maps; a larger scale exercises them
    let mut model = ViTModel::<f64>::new(small_vit(), 5)?;
    model.weights_mut().visit_mut("", &mut |name, w| {
        if name.contains(".w_q.") || name.contains(".w_k.") {
            w.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        }
    });
    let img = random_image(8, &mut rng);
    let k = model.config().proto_dim;
    let d = model.config().d_model;
    let rl = random(vec![1, k], &mut rng, -1.0, 1.0);
    let rc = random(vec![1, d], &mut rng, -1.0, 1.0);
    let targets = [
        "patch_w",
        "patch_b",
        "cls",
        "pos",
        "blocks.0.ln1_g",
        "blocks.0.attn.w_q.0",
        "blocks.0.attn.w_k.1",
        "blocks.1.attn.w_v.0",
        "blocks.1.attn.w_o",
        "blocks.1.mlp_w1",
        "blocks.1.mlp_b2",
        "norm_g",
        "head.w1",
        "head.w2",
    ];
    let leaves = model.weights().leaves();
    for target in targets {
        let value = leaves.iter().find(|(n, _)| n == target).expect("leaf exists").1.clone();
        let e = finite_diff_check(
            |t, x| {
                let mut w = model.bind(t, "");
                w.visit_mut("", &mut |name, var| {
                    if name == target {
                        *var = x;
                    }
                });
                let out = model.forward_view(t, &w, &img)?;
                let a = weighted_sum(t, out.logits, &rl)?;
                let b = weighted_sum(t, out.cls, &rc)?;
                t.add(a, b)
            },
            &value,
            h,
        )?;
        record("vit_forward", e);
    }

    let teacher: Vec<Tensor<f64>> = (0..2)
        .map(|_| teacher_probs(&random(vec![3, 6], &mut rng, -1.0, 1.0), 0.5, None).unwrap())
        .collect();
    let other = random(vec![3, 6], &mut rng, -1.0, 1.0);
    let logits = random(vec![3, 6], &mut rng, -1.0, 1.0);
    let e = finite_diff_check(
        |t, x| {
            let o = t.constant(other.clone());
            distill_loss_on_tape(t, &teacher, &[x, o], 0.1)
        },
        &logits,
        h,
    )?;
    record("distill_loss", e);

    let feats = random(vec![5, 4], &mut rng, -2.0, 2.0);
    let w = random(vec![4, 3], &mut rng, -1.0, 1.0);
    let bvec = random(vec![3], &mut rng, -0.5, 0.5);
    let mut onehot = vec![0.0; 15];
    for i in 0..5 {
        onehot[i * 3 + i % 3] = 1.0;
    }
    let y = Tensor::new(vec![5, 3], onehot)?;
    let e1 = finite_diff_check(
        |t, x| {
            let (f, b) = (t.constant(feats.clone()), t.constant(bvec.clone()));
            ce_loss(t, f, x, b, y.clone(), 5)
        },
        &w,
        h,
    )?;
    let e2 = finite_diff_check(
        |t, x| {
            let (wv, b) = (t.constant(w.clone()), t.constant(bvec.clone()));
            ce_loss(t, x, wv, b, y.clone(), 5)
        },
        &feats,
        h,
    )?;
    let e3 = finite_diff_check(
        |t, x| {
            let (f, wv) = (t.constant(feats.clone()), t.constant(w.clone()));
            ce_loss(t, f, wv, x, y.clone(), 5)
        },
        &bvec,
        h,
    )?;
    record("probe_loss", e1.max(e2).max(e3));

    let secs = t0.elapsed().as_secs_f64();
    let worst = errs.values().fold(0.0f64, |a, &b| a.max(b));
    let list: Vec<String> = errs.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok((
        worst < 1e-6 && secs < 60.0,
        format!(
            "max rel err {worst:.2e} (< 1e-6), {secs:.1}s (< 60s); {}",
            list.join(", ")
        ),
    ))
}

fn random_attention(
    rng: &mut ChaCha8Rng,
    heads: usize,
    d_model: usize,
    d_k: usize,
    d_v: usize,
) -> AttentionParams<Tensor<f64>> {
    AttentionParams {
        heads,
        d_model,
        d_k,
        d_v,
        w_q: (0..heads).map(|_| random(vec![d_model, d_k], rng, -1.0, 1.0)).collect(),
        w_k: (0..heads).map(|_| random(vec![d_model, d_k], rng, -1.0, 1.0)).collect(),
        w_v: (0..heads).map(|_| random(vec![d_model, d_v], rng, -1.0, 1.0)).collect(),
        w_o: random(vec![heads * d_v, d_model], rng, -1.0, 1.0),
        b_o: random(vec![d_model], rng, -1.0, 1.0),
    }
}

// ---- 2 ----

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn oracle_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let dk = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = ex.iter().sum();
            (0..v[0].len())
                .map(|c| ex.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn max_diff(a: &Mat, b: &Tensor<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            worst = worst.max((x - b.get(i, j)).abs());
        }
    }
    worst
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for m in 1..=4 {
        for n in 1..=4 {
            for d_k in 1..=4 {
                for d_v in 1..=4 {
                    let q = random(vec![m, d_k], &mut rng, -2.0, 2.0);
                    let k = random(vec![n, d_k], &mut rng, -2.0, 2.0);
                    let v = random(vec![n, d_v], &mut rng, -2.0, 2.0);
                    let (out, w) = scaled_dot_product_attention(&q, &k, &v)?;
                    if w.shape() != [m, n] {
                        return Ok((false, format!("weights shape {:?} for m={m} n={n}", w.shape())));
                    }
                    worst = worst.max(max_diff(&oracle_attention(&rows(&q), &rows(&k), &rows(&v)), &out));
                    cases += 1;
                    for heads in 1..=4 {
                        let d_model = 1 + (m + n + heads) % 4;
                        let p = random_attention(&mut rng, heads, d_model, d_k, d_v);
                        let xq = random(vec![m, d_model], &mut rng, -1.0, 1.0);
                        let xkv = random(vec![n, d_model], &mut rng, -1.0, 1.0);
                        let got = multi_head_attention(&xq, &xkv, &p)?;
                        let (xq_r, xkv_r) = (rows(&xq), rows(&xkv));
                        let mut cat: Mat = vec![Vec::new(); m];
                        for i in 0..heads {
                            let hq = mat_mul(&xq_r, &rows(&p.w_q[i]));
                            let hk = mat_mul(&xkv_r, &rows(&p.w_k[i]));
                            let hv = mat_mul(&xkv_r, &rows(&p.w_v[i]));
                            for (c, r) in cat.iter_mut().zip(oracle_attention(&hq, &hk, &hv)) {
                                c.extend(r);
                            }
                        }
                        let mut expect = mat_mul(&cat, &rows(&p.w_o));
                        for row in &mut expect {
                            row.iter_mut().zip(p.b_o.data()).for_each(|(x, b)| *x += b);
                        }
                        worst = worst.max(max_diff(&expect, &got));
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok((
        worst <= 1e-6,
        format!("{cases} cases, max abs diff {worst:.2e} (<= 1e-6)"),
    ))
}

// ---- 3 ----

fn teacher_and_ema() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum: f64 = 0.0;
    for tau in [0.04, 0.1, 0.5, 1.0] {
        let logits = random(vec![6, 9], &mut rng, -3.0, 3.0);
        let center: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in [None, Some(center.as_slice())] {
            let p = teacher_probs(&logits, tau, c)?;
            for r in 0..p.rows() {
                worst_sum = worst_sum.max((p.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let p = teacher_probs(&Tensor::<f64>::from_rows(&[vec![1.0, 0.0]])?, 0.5, None)?;
    // softmax([2, 0]) = [1 / (1 + e^-2), e^-2 / (1 + e^-2)]
    let want = [1.0 / (1.0 + (-2.0f64).exp()), (-2.0f64).exp() / (1.0 + (-2.0f64).exp())];
    let ex_err = (p.get(0, 0) - want[0]).abs().max((p.get(0, 1) - want[1]).abs());
    let lit_err = (p.get(0, 0) - 0.8808).abs().max((p.get(0, 1) - 0.1192).abs());

    let cfg = small_vit();
    let student = ViTModel::<f64>::new(cfg.clone(), 1)?;
    let teacher0 = ViTModel::<f64>::new(cfg, 2)?;
    let mut t = teacher0.clone();
    ema_update(&mut t, &student, 0.0)?;
    let copy = t.weights() == student.weights();
    let mut t = teacher0.clone();
    ema_update(&mut t, &student, 1.0)?;
    let identity = t.weights() == teacher0.weights();
    let (mut ones, mut zeros) = (teacher0.clone(), student.clone());
    ones.weights_mut()
        .visit_mut("", &mut |_, w| w.data_mut().iter_mut().for_each(|v| *v = 1.0));
    zeros
        .weights_mut()
        .visit_mut("", &mut |_, w| w.data_mut().iter_mut().for_each(|v| *v = 0.0));
    ema_update(&mut ones, &zeros, 0.9)?;
    let mut scalar_err: f64 = 0.0;
    ones.weights_mut().visit_mut("", &mut |_, w| {
        w.data()
            .iter()
            .for_each(|v| scalar_err = scalar_err.max((v - 0.9).abs()));
    });

    let pass = worst_sum <= 1e-6 && lit_err <= 1e-4 && ex_err <= 1e-12 && copy && identity && scalar_err <= 1e-12;
    Ok((
        pass,
        format!(
            "row sum err {worst_sum:.1e} (<= 1e-6); [[1,0]]@0.5 -> [{:.4},{:.4}] err {lit_err:.1e} (<= 1e-4); \
             lambda 0 copy {copy}, lambda 1 identity {identity}, lambda 0.9 err {scalar_err:.1e} (<= 1e-12)",
            p.get(0, 0),
            p.get(0, 1)
        ),
    ))
}

// ---- 4, 5, 6: smoke run through the command line ----

fn cli(args: &[String]) -> i32 {
    let argv = std::iter::once(OsString::from("lsvt")).chain(args.iter().map(OsString::from));
    lsvt_core::cli::run_cli(argv)
}

fn stage(name: &str, run_dir: &Path, sets: &[&str]) -> Result<(), String> {
    let mut args = vec![
        name.to_string(),
        "--set".into(),
        format!("run_dir={}", run_dir.display()),
    ];
    for s in sets {
        args.push("--set".into());
        args.push(s.to_string());
    }
    match cli(&args) {
        0 => Ok(()),
        code => Err(format!("stage {name} exited with {code}")),
    }
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, Box<dyn std::error::Error>> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(
            headers
                .iter()
                .map(String::from)
                .zip(rec.iter().map(String::from))
                .collect(),
        );
    }
    Ok(out)
}

fn field(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row.get(key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

struct Smoke {
    dir: tempfile::TempDir,
    seconds: f64,
}

static SMOKE: std::sync::OnceLock<Result<Smoke, String>> = std::sync::OnceLock::new();

fn smoke() -> Result<&'static Smoke, String> {
    SMOKE
        .get_or_init(|| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let run = dir.path().join("on");
            let t0 = Instant::now();
            for s in ["synth", "pretrain", "probe", "eval"] {
                stage(s, &run, &[])?;
            }
            Ok(Smoke {
                seconds: t0.elapsed().as_secs_f64(),
                dir,
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn final_entropy(run: &Path) -> Result<f64, Box<dyn std::error::Error>> {
    let stats = read_csv(&run.join("epoch_stats.csv"))?;
    Ok(field(stats.last().ok_or("no epochs recorded")?, "teacher_entropy"))
}

fn centering_entropy() -> Outcome {
    let s = smoke()?;
    let on = final_entropy(&s.dir.path().join("on"))?;
    let off_dir = s.dir.path().join("off");
    let data = format!("data_dir={}", s.dir.path().join("on").join("data").display());
    stage("pretrain", &off_dir, &[&data, "centering=false"])?;
    let off = final_entropy(&off_dir)?;
    let k = ViTConfig::tiny().proto_dim;
    let floor = 0.5 * (k as f64).ln();
    Ok((
        on >= floor && off < on,
        format!("K={k}: entropy with centering {on:.4} (>= {floor:.4}), without {off:.4} (< with)"),
    ))
}

fn synthetic_probe() -> Outcome {
    let s = smoke()?;
    let report = read_csv(&s.dir.path().join("on").join("eval_report.csv"))?;
    let row = report.first().ok_or("empty eval report")?;
    let auc = field(row, "auc");
    let n = field(row, "n");
    let mode = row.get("mode").cloned().unwrap_or_default();
    Ok((
        auc >= 0.90 && s.seconds <= 600.0 && mode == "frozen",
        format!(
            "{mode} probe test AUC {auc:.4} on {n} images (>= 0.90), synth+pretrain+probe+eval {:.0}s (<= 600s)",
            s.seconds
        ),
    ))
}

fn ablation() -> Outcome {
    let s = smoke()?;
    let run = s.dir.path().join("on");
    stage("ablate", &run, &[])?;
    let cells = read_csv(&run.join("ablation.csv"))?;
    let fractions = [0.065, 0.1, 0.25, 0.5, 0.75, 1.0];
    let dropouts = [0.0, 0.1, 0.2, 0.5];
    let mut missing = Vec::new();
    let mut worse = Vec::new();
    let mut summary = Vec::new();
    for mode in ["frozen", "end_to_end"] {
        let find = |f: f64, d: f64| {
            cells.iter().find(|c| {
                c.get("mode").map(String::as_str) == Some(mode)
                    && (field(c, "label_fraction") - f).abs() < 1e-9
                    && (field(c, "dropout") - d).abs() < 1e-9
                    && c.get("status").map(String::as_str) == Some("ok")
            })
        };
        for &f in &fractions {
            for &d in &dropouts {
                if find(f, d).is_none() {
                    missing.push(format!("{mode}/{f}/{d}"));
                }
            }
        }
        for &d in &dropouts {
            if let (Some(lo), Some(hi)) = (find(0.065, d), find(1.0, d)) {
                let (a, b) = (field(lo, "test_auc"), field(hi, "test_auc"));
                summary.push(format!("{mode} p={d}: {a:.3}->{b:.3}"));
                if a.is_nan() || b.is_nan() || b < a {
                    worse.push(format!("{mode}/{d}"));
                }
            }
        }
    }
    Ok((
        missing.is_empty() && worse.is_empty(),
        format!(
            "{} cells, missing {missing:?}, AUC(1.0) < AUC(0.065) at {worse:?}; {}",
            cells.len(),
            summary.join(", ")
        ),
    ))
}

// ---- 7 ----

/// ROC area by walking thresholds from high to low and summing trapezoids.
fn trapezoid_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let n = labels.len() as f64 - p;
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) / n * (tp + tp0) / (2.0 * p);
    }
    area
}

fn metric_oracles() -> Outcome {
    let a1 = roc_auc_binary(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false])?;
    let a2 = roc_auc_binary(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false])?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n = rng.gen_range(2..80);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = if i % 2 == 0 {
            (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect()
        } else {
            (0..n).map(|_| rng.gen::<f64>()).collect()
        };
        worst = worst.max((roc_auc_binary(&scores, &labels)? - trapezoid_auc(&scores, &labels)).abs());
    }
    let mut row_err: f64 = 0.0;
    let mut macro_gap: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(6..40);
        let c = rng.gen_range(2..5);
        let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.gen_range(0..c) }).collect();
        let mut probs = Vec::with_capacity(n * c);
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / z));
        }
        let probs = Tensor::new(vec![n, c], probs)?;
        let m = macro_metrics(&probs, &labels)?;
        for row in &m.confusion {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        if c == 2 {
            let pos: Vec<f64> = (0..n).map(|r| probs.get(r, 1)).collect();
            let l: Vec<bool> = labels.iter().map(|&v| v == 1).collect();
            macro_gap = macro_gap.max((m.auc - roc_auc_binary(&pos, &l)?).abs());
        }
    }
    let pass = a1 == 1.0 && a2 == 0.75 && worst <= 1e-9 && row_err <= 1e-12 && macro_gap == 0.0;
    Ok((
        pass,
        format!(
            "AUC examples {a1} and {a2}; rank vs trapezoid max diff {worst:.1e} over 1000 (<= 1e-9); \
             confusion row sum err {row_err:.1e}; two-class macro vs binary gap {macro_gap}"
        ),
    ))
}

// ---- 8 ----

fn stratified() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fr = [0.6, 0.2, 0.2];
    let mut worst: f64 = 0.0;
    let mut broken = 0;
    for i in 0..1000 {
        let classes = rng.gen_range(2..6);
        let mut labels = Vec::new();
        for c in 0..classes {
            labels.extend(std::iter::repeat_n(c, rng.gen_range(3..60)));
        }
        labels.shuffle(&mut rng);
        let spec = SplitSpec {
            fractions: fr,
            seed: i,
            stratified: true,
        };
        let parts = split_indices(&labels, &spec)?;
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        if all != (0..labels.len()).collect::<Vec<_>>() {
            broken += 1;
        }
        for c in 0..classes {
            let total = labels.iter().filter(|&&l| l == c).count() as f64;
            for (part, f) in parts.iter().zip(fr) {
                let got = part.iter().filter(|&&k| labels[k] == c).count() as f64;
                worst = worst.max((got - f * total).abs());
            }
        }
    }
    Ok((
        worst <= 1.0 && broken == 0,
        format!("1000 manifests: max per-class deviation {worst:.3} (<= 1), {broken} not disjoint/exhaustive"),
    ))
}

// ---- 9 ----

fn tsne() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(vec![60, 7], &mut rng, -3.0, 3.0);
    let p = joint_affinities(&x, 15.0)?;
    let n = p.rows();
    let (mut asym, mut diag, mut sum) = (0.0f64, 0.0f64, 0.0);
    for i in 0..n {
        diag = diag.max(p.get(i, i).abs());
        for j in 0..n {
            asym = asym.max((p.get(i, j) - p.get(j, i)).abs());
            sum += p.get(i, j);
        }
    }
    let target = 15f64.log2();
    let bits = conditional_entropies(&x, 15.0)?
        .iter()
        .fold(0.0f64, |a, h| a.max((h - target).abs()));

    let normal = Normal::new(0.0, 1.0)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        for _ in 0..50 {
            for k in 0..16 {
                let center = if k % 3 == c { 6.0 } else { 0.0 };
                data.push(center + normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    let clusters = Tensor::new(vec![150, 16], data)?;
    let cfg = TsneConfig {
        seed: 4,
        ..TsneConfig::default()
    };
    let a = tsne_embed(&clusters, &cfg)?;
    let b = tsne_embed(&clusters, &cfg)?;
    let sil = silhouette(&a.points, &labels)?;
    let same = a.points == b.points;
    Ok((
        asym == 0.0 && diag == 0.0 && (sum - 1.0).abs() <= 1e-9 && bits <= 1e-4 && sil >= 0.5 && same,
        format!(
            "P asymmetry {asym:.1e}, diagonal {diag:.1e}, |sum-1| {:.1e} (<= 1e-9); entropy off target by {bits:.1e} bits (<= 1e-4); \
             3-cluster silhouette {sil:.3} (>= 0.5); same seed identical {same}",
            (sum - 1.0).abs()
        ),
    ))
}

// ---- 10 ----

fn csv_snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in [dir.to_path_buf(), dir.join("data")] {
        let Ok(entries) = std::fs::read_dir(&sub) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir()?;

    let vit = small_vit();
    let distill = DistillConfig {
        epochs: 3,
        batch_size: 2,
        lr: 0.05,
        ..DistillConfig::default()
    };
    let mut views = ViewConfig::for_size(8);
    views.local.count = 2;
    views.local.scale = (0.2, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let images: Vec<Image> = (0..5).map(|_| random_image(8, &mut rng)).collect();
    let mut state = TrainerState::<f32>::new(vit, distill, views, ChannelStats::identity(3))?;
    for _ in 0..4 {
        state.train_step(&images)?;
    }
    let path = dir.path().join("state.lsvt");
    save_checkpoint(&state, &path)?;
    let loaded: TrainerState<f32> = load_checkpoint(&path)?;
    let path2 = dir.path().join("again.lsvt");
    save_checkpoint(&loaded, &path2)?;
    let bit_exact = loaded == state && std::fs::read(&path)? == std::fs::read(&path2)?;
    let mut resumed = loaded;
    state.train_step(&images)?;
    resumed.train_step(&images)?;
    let resume_ok = resumed == state;

    let run = dir.path().join("run");
    let sets = [
        "synth_train=24",
        "synth_test=12",
        "epochs=2",
        "batch_size=8",
        "probe_epochs=40",
        "probe_e2e_epochs=3",
        "ablate_fractions=[0.5,1.0]",
        "ablate_dropouts=[0.0,0.2]",
        "tsne_iterations=300",
        "tsne_png_size=64",
        "attmap_count=2",
    ];
    let mut diffs = Vec::new();
    let stages = ["synth", "pretrain", "probe", "eval", "ablate", "tsne", "attmap"];
    for s in stages {
        stage(s, &run, &sets)?;
        let first = csv_snapshot(&run);
        stage(s, &run, &sets)?;
        let second = csv_snapshot(&run);
        if first != second {
            diffs.push(s);
        }
    }
    let files = csv_snapshot(&run).len();
    Ok((
        bit_exact && resume_ok && diffs.is_empty(),
        format!(
            "save/load bit-exact {bit_exact}; resumed step equals uninterrupted {resume_ok}; \
             {} stages rerun over {files} CSVs, changed after rerun: {diffs:?}",
            stages.len()
        ),
    ))
}

// ---- 11 ----

fn heatmaps() -> Outcome {
    let dir = tempfile::tempdir()?;
    let model = ViTModel::<f32>::new(ViTConfig::tiny(), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(32, &mut rng);
    let a = extract_attention_map(&model, &img)?;
    let b = extract_attention_map(&model, &img)?;
    let shape_ok = a.height == 32 && a.width == 32 && a.values.len() == 32 * 32;
    let range_ok = a.values.iter().all(|v| (0.0..=1.0).contains(v));
    let (png, csv_path) = (dir.path().join("map.png"), dir.path().join("map.csv"));
    a.write_png(&png)?;
    a.write_csv(&csv_path)?;
    let raw = decode_image(&png)?;
    let text = std::fs::read_to_string(&csv_path)?;
    let csv_vals: Vec<f64> = text
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
        .collect();
    let mut worst: f64 = 0.0;
    let round_ok = raw.pixels.len() == csv_vals.len() && raw.channels == 1;
    for (&p, &v) in raw.pixels.iter().zip(&csv_vals) {
        worst = worst.max((p as f64 / 255.0 - v).abs());
    }
    Ok((
        shape_ok && range_ok && a == b && round_ok && worst <= 1.0 / 255.0,
        format!(
            "{}x{} map, values in [0,1] {range_ok}, deterministic {}, PNG vs CSV max diff {worst:.4} (<= {:.4})",
            a.height,
            a.width,
            a == b,
            1.0 / 255.0
        ),
    ))
}
