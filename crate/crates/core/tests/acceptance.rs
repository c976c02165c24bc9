//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `BCG_ACCEPTANCE_ONLY=1,2,5` restricts the
//! run to a subset; `RUST_LOG=info` shows training progress.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use bcg_core::cl::{cl_loss, infonce, koleo, ClConfig};
use bcg_core::dataset::Dataset;
use bcg_core::distill::{distill_loss, train_distill, DistillConfig, TeacherInit};
use bcg_core::encoder::{param_count, Encoder, EncoderConfig, ProjectionHead, SizeTag};
use bcg_core::eval::{
    bootstrap_retrieval, cross_modal_retrieval, embed_split, probe_embeddings, procrustes_align, Granularity, Target,
};
use bcg_core::experiment::{acquire_dataset, EncoderSection, ExperimentConfig};
use bcg_core::linalg::{det, Mat};
use bcg_core::mae::{kept_count, mae_loss, mask_indices, train_mae, MaeModel};
use bcg_core::model::{EncoderBundle, Modality};
use bcg_core::pipeline::{run_recipe, stage_seed, untrained_student};
use bcg_core::synth::labels_from_rr;
use bcg_core::train::OptimConfig;
use bcg_tensor::gradcheck::{check_inputs, check_params};
use bcg_tensor::{clip_grad_norm, AdamW, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn lift<T>(r: bcg_core::Result<T>) -> bcg_tensor::Result<T> {
    r.map_err(|e| TensorError::InvalidArgument { op: "acceptance", msg: e.to_string() })
}

// ---------------------------------------------------------------- autodiff

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>()).unwrap()
}

fn project(t: &mut Tape<f64>, out: Var) -> bcg_tensor::Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let w = t.constant(Tensor::from_f64(&shape, &w).unwrap());
    let p = t.mul(out, w)?;
    t.sum_all(p)
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> bcg_tensor::Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let s = [2, 3, 4];
    let a = rand_tensor(rng, &s, -1.0, 1.0);
    let full = rand_tensor(rng, &s, -1.0, 1.0);
    let row = rand_tensor(rng, &[4], -1.0, 1.0);
    let pos = rand_tensor(rng, &s, 0.5, 2.0);
    let away = Tensor::from_f64(&s, &a.data().iter().map(|&x| if x.abs() < 0.05 { x + 0.2 } else { x }).collect::<Vec<_>>()).unwrap();
    let gain = rand_tensor(rng, &[4], 0.5, 1.5);
    let bias = rand_tensor(rng, &[4], -0.5, 0.5);
    let m = rand_tensor(rng, &[4, 5], -1.0, 1.0);
    let bm = rand_tensor(rng, &[2, 4, 3], -1.0, 1.0);
    let kept = rand_tensor(rng, &[2, 2, 4], -1.0, 1.0);
    let fill = rand_tensor(rng, &[4], 0.0, 1.0);
    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(rng, &[2, 5, 8], -1.0, 1.0)).collect();
    let idx = vec![vec![0, 2], vec![1, 2]];
    let idx2 = idx.clone();
    vec![
        ("add", vec![a.clone(), row.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), full.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), row.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -2.5))),
        ("add_scalar", vec![a.clone()], Box::new(|t, v| t.add_scalar(v[0], 0.3))),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("log", vec![pos.clone()], Box::new(|t, v| t.log(v[0]))),
        ("sqrt", vec![pos], Box::new(|t, v| t.sqrt(v[0]))),
        ("gelu", vec![a.clone()], Box::new(|t, v| t.gelu(v[0]))),
        ("clamp_min", vec![away], Box::new(|t, v| t.clamp_min(v[0], 0.0))),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], &[6, 4]))),
        ("slice", vec![a.clone()], Box::new(|t, v| t.slice(v[0], 2, 1, 2))),
        ("gather_rows", vec![a.clone()], Box::new(|t, v| t.gather_rows(v[0], &[1, 0, 1]))),
        ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0], 1))),
        ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0], 2))),
        ("sum_all", vec![a.clone()], Box::new(|t, v| t.sum_all(v[0]))),
        ("mean_all", vec![a.clone()], Box::new(|t, v| t.mean_all(v[0]))),
        ("matmul", vec![a.clone(), m], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_batched", vec![a.clone(), bm], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("softmax", vec![a.clone()], Box::new(|t, v| t.softmax(v[0], 2))),
        ("log_softmax", vec![a.clone()], Box::new(|t, v| t.log_softmax(v[0], 1))),
        ("layer_norm", vec![a.clone(), gain, bias], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("l2_normalize", vec![a.clone()], Box::new(|t, v| t.l2_normalize(v[0], 1e-12))),
        ("take_tokens", vec![a.clone()], Box::new(move |t, v| t.take_tokens(v[0], &idx))),
        ("scatter_tokens", vec![kept, fill], Box::new(move |t, v| t.scatter_tokens(v[0], v[1], &idx2, 3))),
        ("mean_pool", vec![a], Box::new(|t, v| t.mean_pool(v[0]))),
        ("attention", qkv, Box::new(|t, v| t.attention(v[0], v[1], v[2], 2))),
    ]
}

fn micro(channels: usize) -> EncoderConfig {
    EncoderConfig {
        size: SizeTag::Custom,
        token_dim: 8,
        n_layers: 1,
        n_heads: 2,
        mlp_hidden: 16,
        patch_window_s: 0.3125,
        input_channels: channels,
        input_rate_hz: 64.0,
        segment_s: 1.25,
    }
}

fn end_to_end_checks(rng: &mut ChaCha8Rng) -> bcg_tensor::Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let mut push = |what: &str, checks: Vec<bcg_tensor::gradcheck::ParamCheck>| {
        out.extend(checks.into_iter().map(|c| (format!("{what}:{}", c.name), c.rel_error)));
    };

    let cfg = micro(4);
    let mut store = ParamStore::<f64>::new();
    let model = lift(MaeModel::new(cfg.clone(), 1, &mut store, rng))?;
    let x = rand_tensor(rng, &[2, 4, lift(cfg.patch_dim())?], -1.0, 1.0);
    let (kept, masked) = (vec![vec![1], vec![3]], vec![vec![0, 2, 3], vec![0, 1, 2]]);
    push(
        "mae",
        check_params(&mut store, 1e-4, 6, |t, s| {
            let p = t.constant(x.clone());
            let r = lift(model.forward(t, s, p, &kept))?;
            lift(mae_loss(t, r, p, &masked))
        })?,
    );

    let cfg = micro(3);
    let mut store = ParamStore::<f64>::new();
    let enc = lift(Encoder::new(cfg.clone(), &mut store, rng))?;
    let head = ProjectionHead::new(&mut store, "head", 8, 12, 6, rng);
    let xa = rand_tensor(rng, &[4, 4, lift(cfg.patch_dim())?], -1.0, 1.0);
    let zb = rand_tensor(rng, &[4, 6], -1.0, 1.0);
    let ccfg = ClConfig { temperature: 0.5, ..ClConfig::default() };
    push(
        "cl",
        check_params(&mut store, 1e-4, 6, |t, s| {
            let p = t.constant(xa.clone());
            let e = lift(enc.embed(t, s, p))?;
            let za = lift(head.forward(t, s, e))?;
            let zb = t.constant(zb.clone());
            lift(cl_loss(t, za, zb, &ccfg))
        })?,
    );

    let mut teacher = ParamStore::<f64>::new();
    let t_head = ProjectionHead::new(&mut teacher, "head", 8, 12, 6, rng);
    let te = rand_tensor(rng, &[4, 8], -1.0, 1.0);
    let forward = |t: &mut Tape<f64>, ss: &ParamStore<f64>, ts: &ParamStore<f64>| -> bcg_tensor::Result<Var> {
        let te = t.constant(te.clone());
        let ht = lift(t_head.forward(t, ts, te))?;
        let p = t.constant(xa.clone());
        let e = lift(enc.embed(t, ss, p))?;
        let hs = lift(head.forward(t, ss, e))?;
        lift(distill_loss(t, ht, hs, 0.7, 0.5))
    };
    let fixed_teacher = teacher.duplicate();
    push("distill-student", check_params(&mut store, 1e-4, 6, |t, s| forward(t, s, &fixed_teacher))?);
    let fixed_student = store.duplicate();
    push("distill-teacher", check_params(&mut teacher, 1e-4, 6, |t, s| forward(t, &fixed_student, s))?);
    Ok(out)
}

fn criterion_autodiff(_: &mut Desk) -> Check {
    let rng = &mut ChaCha8Rng::seed_from_u64(1);
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, f) in op_cases(rng) {
        let errs = check_inputs(&inputs, 1e-5, |t, v| {
            let o = f(t, v)?;
            project(t, o)
        })
        .map_err(fail)?;
        for e in errs {
            if e > worst_op.1 {
                worst_op = (name, e);
            }
        }
    }
    let e2e = end_to_end_checks(rng).map_err(fail)?;
    let worst_e2e = e2e.iter().fold((String::new(), 0.0f64), |w, (n, e)| if *e > w.1 { (n.clone(), *e) } else { w });
    ensure(
        worst_op.1 < 1e-4 && worst_e2e.1 < 1e-3,
        format!("worst op {} {:.1e} (< 1e-4), worst end-to-end {} {:.1e} (< 1e-3)", worst_op.0, worst_op.1, worst_e2e.0, worst_e2e.1),
    )
}

// ---------------------------------------------------------------- formulas

fn scalar(t: &mut Tape<f64>, v: Var) -> f64 {
    t.value(v).item()
}

fn criterion_formulas(_: &mut Desk) -> Check {
    let mut bad = Vec::new();
    let mat = |t: &mut Tape<f64>, rows: usize, d: Vec<f64>| t.leaf(Tensor::new(vec![rows, d.len() / rows], d).unwrap());

    let mut t = Tape::<f64>::new();
    let a = mat(&mut t, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let l = infonce(&mut t, a, a, 1.0).map_err(fail)?;
    let v = scalar(&mut t, l);
    if (v - 0.31326).abs() > 1e-5 {
        bad.push(format!("infonce {v}"));
    }

    let h = mat(&mut t, 2, vec![1.0, 0.0, 0.5, 3f64.sqrt() / 2.0]);
    let (k, _) = koleo(&mut t, h).map_err(fail)?;
    let v = scalar(&mut t, k);
    if v.abs() > 1e-9 {
        bad.push(format!("koleo at distance 1: {v}"));
    }
    let h = mat(&mut t, 2, vec![0.0, 1.0, 0.0, -1.0]);
    let (k, _) = koleo(&mut t, h).map_err(fail)?;
    let v = scalar(&mut t, k);
    if (v + 2f64.ln()).abs() > 1e-9 {
        bad.push(format!("koleo antipodal: {v}"));
    }

    let rng = &mut ChaCha8Rng::seed_from_u64(2);
    let ht = rand_tensor(rng, &[8, 6], -1.0, 1.0);
    let hs = rand_tensor(rng, &[8, 6], -1.0, 1.0);
    let both = |lambda_path: bool| {
        let mut t = Tape::<f64>::new();
        let (a, b) = (t.leaf(ht.clone()), t.leaf(hs.clone()));
        let l = if lambda_path { distill_loss(&mut t, a, b, 1.0, 0.04) } else { infonce(&mut t, a, b, 0.04) };
        l.map(|l| scalar(&mut t, l))
    };
    let (d, direct) = (both(true).map_err(fail)?, both(false).map_err(fail)?);
    if d.to_bits() != direct.to_bits() {
        bad.push(format!("distill lambda=1 {d} vs directional {direct}"));
    }

    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::from_f64(&[1], &[1.0]).unwrap());
    store.get_mut(p).grad[0] = 1.0;
    let mut adam = AdamW::new(0.1, 0.0);
    adam.step(&mut store).map_err(fail)?;
    let stepped = store.value(p).data()[0];
    // m_hat = v_hat = 1, so the update is lr / (1 + eps).
    let by_hand = 1.0 - 0.1 / (1.0 + 1e-8);
    if (stepped - 0.900_000_031_6).abs() > 1e-7 || (stepped - by_hand).abs() > 1e-12 {
        bad.push(format!("adamw step {stepped}"));
    }

    let mut store = ParamStore::<f64>::new();
    let g = store.add("g", Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
    store.get_mut(g).grad.copy_from_slice(&[3.0, 4.0]);
    clip_grad_norm(&mut [&mut store], 3.0);
    if store.grad(g) != [1.8, 2.4] {
        bad.push(format!("clip {:?}", store.grad(g)));
    }

    let cases: [(&[f64], (f64, f64, f64)); 3] = [
        (&[1.0; 8], (60.0, 0.0, 0.0)),
        (&[0.8, 1.0, 0.8, 1.0], (60.0 / 0.9, 100.0, 200.0)),
        (&[1.0, 1.1], (60.0 / 1.05, 50.0, 100.0)),
    ];
    for (rr, (hr, sdnn, rmssd)) in cases {
        let l = labels_from_rr(rr).map_err(fail)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
        if !(close(l.hr, hr) && close(l.sdnn, sdnn) && close(l.rmssd, rmssd)) {
            bad.push(format!("labels {rr:?} -> {l:?}"));
        }
    }
    if labels_from_rr(&[0.9]).is_ok() {
        bad.push("labels from a single interval accepted".into());
    }
    ensure(bad.is_empty(), if bad.is_empty() { "infonce, koleo, distill, adamw, clip, labels exact".into() } else { bad.join("; ") })
}

// ---------------------------------------------------------------- masking

fn criterion_masking(_: &mut Desk) -> Check {
    let rng = &mut ChaCha8Rng::seed_from_u64(3);
    let (n, draws) = (192, 100_000);
    let mut freq = vec![0u32; n];
    let mut wrong = 0;
    for _ in 0..draws {
        let (kept, masked) = mask_indices(n, 0.8, rng);
        if kept.len() != 38 || masked.len() != n - 38 {
            wrong += 1;
        }
        kept.iter().for_each(|&i| freq[i] += 1);
    }
    let expect = 38.0 / 192.0;
    let dev = freq.iter().map(|&f| (f as f64 / draws as f64 - expect).abs()).fold(0.0, f64::max);
    ensure(
        wrong == 0 && kept_count(n, 0.8) == 38 && dev <= 0.005,
        format!("{wrong} draws with a wrong count, max keep-frequency deviation {dev:.4} (<= 0.005)"),
    )
}

// ---------------------------------------------------------------- retrieval

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

fn criterion_chance(_: &mut Desk) -> Check {
    let rng = &mut ChaCha8Rng::seed_from_u64(4);
    let n = 2560;
    let unit = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        rows.into_iter()
            .map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / norm).collect()
            })
            .collect()
    };
    let q = unit(gaussian(rng, n, 32));
    let c = unit(gaussian(rng, n, 32));
    let pid: Vec<u32> = (0..n as u32).collect();
    let r = bootstrap_retrieval(&q, &c, &pid, 256, 100, 9).map_err(fail)?;
    ensure(
        r.pool_size == 256.0 && (r.mean_rank_mean - 128.5).abs() <= 0.05 * 128.5 && (0.0..=1.5).contains(&r.top1_accuracy_percent_mean),
        format!("mean rank {:.2} (128.5 +- 5%), top-1 {:.3}% (<= 1.5%)", r.mean_rank_mean, r.top1_accuracy_percent_mean),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Mat {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for mut v in gaussian(rng, d, d) {
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.iter().map(|x| x / norm).collect());
    }
    if det(&Mat::from_rows(&q).unwrap()) < 0.0 {
        q[0].iter_mut().for_each(|x| *x = -*x);
    }
    Mat::from_rows(&q).unwrap()
}

fn criterion_procrustes(_: &mut Desk) -> Check {
    let rng = &mut ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (200, 16);
    let x = gaussian(rng, n, d);
    let r0 = random_rotation(rng, d);
    let t0: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
    let y: Vec<Vec<f64>> = Mat::from_rows(&x)
        .unwrap()
        .matmul(&r0)
        .to_rows()
        .into_iter()
        .map(|r| r.iter().zip(&t0).map(|(v, t)| 2.0 * v + t).collect())
        .collect();
    let fit = procrustes_align(&x, &y).map_err(fail)?;
    let same = procrustes_align(&x, &x).map_err(fail)?;
    ensure(
        fit.residual < 1e-6 && same.residual == 0.0,
        format!("recovery residual {:.1e} (< 1e-6, scale {:.6}), identity residual {:e} (== 0)", fit.residual, fit.scale, same.residual),
    )
}

// ---------------------------------------------------------------- desk-scale runs

/// Models trained once and shared by the desk-scale criteria.
struct Trained {
    cfg: ExperimentConfig,
    data: Dataset,
    teacher: EncoderBundle,
    accel_mae: EncoderBundle,
    kd_student: EncoderBundle,
    kd_teacher: EncoderBundle,
}

#[derive(Default)]
struct Desk {
    dir: Option<tempfile::TempDir>,
    trained: Option<Result<Trained, String>>,
}

impl Desk {
    fn cfg(&mut self) -> Result<ExperimentConfig, String> {
        if self.dir.is_none() {
            self.dir = Some(tempfile::tempdir().map_err(fail)?);
        }
        let dir = self.dir.as_ref().unwrap().path();
        let mut cfg = ExperimentConfig::desk();
        cfg.out_dir = dir.join("runs");
        cfg.data.dir = Some(dir.join("data"));
        Ok(cfg)
    }

    fn trained(&mut self) -> Result<&Trained, String> {
        if self.trained.is_none() {
            let cfg = self.cfg()?;
            let made = train_desk(cfg).map_err(fail);
            self.trained = Some(made);
        }
        self.trained.as_ref().unwrap().as_ref().map_err(Clone::clone)
    }
}

fn train_desk(cfg: ExperimentConfig) -> bcg_core::Result<Trained> {
    let t0 = Instant::now();
    let data = acquire_dataset(&cfg)?;
    eprintln!("desk data: {} segments in {:.0}s", data.segments.len(), t0.elapsed().as_secs_f64());
    let mae = |m: Modality| -> bcg_core::Result<EncoderBundle> {
        let t0 = Instant::now();
        let out = train_mae(&data, m, &cfg.encoder_for(m), &cfg.mae, stage_seed(cfg.seed, 1 + m as u64), None)?;
        let (head, tail) = out.log.head_tail_mean(50);
        eprintln!("{}-mae: loss {head:.4} -> {tail:.4} in {:.0}s", m.name(), t0.elapsed().as_secs_f64());
        out.bundle(m)
    };
    let teacher = mae(Modality::Ppg)?;
    let accel_mae = mae(Modality::Accel)?;
    let t0 = Instant::now();
    let kd = train_distill(&data, &teacher, &cfg.distill, &cfg.augment, stage_seed(cfg.seed, 10), None)?;
    let (head, tail) = kd.log.head_tail_mean(50);
    eprintln!("accel-kd: loss {head:.4} -> {tail:.4} in {:.0}s", t0.elapsed().as_secs_f64());
    Ok(Trained { cfg, data, teacher, accel_mae, kd_student: kd.student, kd_teacher: kd.teacher })
}

fn hr_probe_mae(data: &Dataset, bundle: &EncoderBundle, fraction: f64, seed: u64) -> Result<f64, String> {
    let emb = embed_split(bundle, data, false).map_err(fail)?;
    let r = probe_embeddings(data, &emb, Target::Hr, Granularity::Segment, fraction, seed).map_err(fail)?;
    r.metrics.mae.ok_or_else(|| "probe produced no MAE".to_string())
}

fn criterion_distillation_signal(desk: &mut Desk) -> Check {
    let tr = desk.trained()?;
    let e = &tr.cfg.eval;
    let seed = stage_seed(tr.cfg.seed, 200);
    let kd = cross_modal_retrieval(&tr.kd_student, &tr.kd_teacher, &tr.data, true, e.pool_participants, e.n_pools, seed)
        .map_err(fail)?;
    let untrained = untrained_student(&tr.cfg, None, stage_seed(tr.cfg.seed, 11)).map_err(fail)?;
    let rand = cross_modal_retrieval(&untrained, &tr.kd_teacher, &tr.data, true, e.pool_participants, e.n_pools, seed)
        .map_err(fail)?;
    let chance_top1 = 100.0 / kd.pool_size;
    let chance_rank = (kd.pool_size + 1.0) / 2.0;
    let kd_ok = kd.top1_accuracy_percent_mean >= 50.0 * chance_top1 && kd.mean_rank_mean <= 0.1 * chance_rank;
    let rand_ok = rand.top1_accuracy_percent_mean <= 3.0 * chance_top1 && rand.mean_rank_mean >= chance_rank / 3.0;
    ensure(
        kd_ok && rand_ok,
        format!(
            "pool {:.0}: distilled top-1 {:.2}% (>= {:.2}%) mean rank {:.1} (<= {:.1}); untrained top-1 {:.2}% (<= {:.2}%) mean rank {:.1} (>= {:.1})",
            kd.pool_size,
            kd.top1_accuracy_percent_mean,
            50.0 * chance_top1,
            kd.mean_rank_mean,
            0.1 * chance_rank,
            rand.top1_accuracy_percent_mean,
            3.0 * chance_top1,
            rand.mean_rank_mean,
            chance_rank / 3.0
        ),
    )
}

fn criterion_probe_ordering(desk: &mut Desk) -> Check {
    let tr = desk.trained()?;
    let seed = stage_seed(tr.cfg.seed, 100);
    let mut parts = Vec::new();
    let mut ok = true;
    for f in [1.0, 0.01] {
        let kd = hr_probe_mae(&tr.data, &tr.kd_student, f, seed)?;
        let base = hr_probe_mae(&tr.data, &tr.accel_mae, f, seed)?;
        let teacher = hr_probe_mae(&tr.data, &tr.teacher, f, seed)?;
        ok &= kd < base && teacher <= kd;
        parts.push(format!("{}%: ppg-mae {teacher:.2} <= accel-kd {kd:.2} < accel-mae {base:.2}", f * 100.0));
    }
    ensure(ok, format!("HR probe MAE (bpm) {}", parts.join("; ")))
}

/// Shorter distillation runs for the criteria that need several of them.
fn short_distill(cfg: &ExperimentConfig, steps: u64) -> DistillConfig {
    DistillConfig {
        optim: OptimConfig { steps, warmup_iters: steps / 10, ..cfg.distill.optim.clone() },
        ..cfg.distill.clone()
    }
}

const ABLATION_STEPS: u64 = 600;
const COMPRESSION_STEPS: u64 = 300;

fn criterion_frozen_teacher(desk: &mut Desk) -> Check {
    let tr = desk.trained()?;
    let mut held = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let s = stage_seed(seed, 40);
        let mut maes = Vec::new();
        for (freeze, init) in [(true, TeacherInit::Pretrained), (false, TeacherInit::Random)] {
            let dcfg = DistillConfig { freeze_teacher: freeze, teacher_init: init, ..short_distill(&tr.cfg, ABLATION_STEPS) };
            let t0 = Instant::now();
            let out = train_distill(&tr.data, &tr.teacher, &dcfg, &tr.cfg.augment, s, None).map_err(fail)?;
            maes.push(hr_probe_mae(&tr.data, &out.student, 1.0, stage_seed(seed, 100))?);
            eprintln!("seed {seed} freeze {freeze}: probe MAE {:.3} after {:.0}s", maes[maes.len() - 1], t0.elapsed().as_secs_f64());
        }
        if maes[1] >= maes[0] {
            held += 1;
        }
        parts.push(format!("seed {seed}: frozen {:.2} vs unfrozen-random {:.2}", maes[0], maes[1]));
    }
    ensure(held >= 2, format!("{held}/3 seeds in the expected direction; {}", parts.join("; ")))
}

fn criterion_compression(desk: &mut Desk) -> Check {
    // Published size table, parameters in thousands.
    let published = [(SizeTag::XS, 800.0), (SizeTag::S, 1200.0), (SizeTag::M, 3300.0), (SizeTag::L, 4800.0), (SizeTag::XL, 6300.0)];
    let mut parts = Vec::new();
    let mut ok = true;
    for (tag, k) in published {
        let n = param_count(&EncoderConfig::preset(tag, 3)).map_err(fail)? as f64 / 1000.0;
        ok &= (n / k - 1.0).abs() <= 0.1;
        parts.push(format!("{tag:?} {n:.0}K/{k:.0}K"));
    }
    let tr = desk.trained()?;
    for tag in [SizeTag::XS, SizeTag::XL] {
        let student = EncoderSection::preset(tag).for_modality(Modality::Accel, &tr.cfg.data.synth);
        let dcfg = DistillConfig { student: Some(student), ..short_distill(&tr.cfg, COMPRESSION_STEPS) };
        let t0 = Instant::now();
        let out = train_distill(&tr.data, &tr.teacher, &dcfg, &tr.cfg.augment, stage_seed(tr.cfg.seed, 20), None).map_err(fail)?;
        eprintln!("{tag:?} student distilled in {:.0}s", t0.elapsed().as_secs_f64());
        let seed = stage_seed(tr.cfg.seed, 100);
        let kd = hr_probe_mae(&tr.data, &out.student, 1.0, seed)?;
        let untrained = untrained_student(&tr.cfg, Some(tag), stage_seed(tr.cfg.seed, 21)).map_err(fail)?;
        let base = hr_probe_mae(&tr.data, &untrained, 1.0, seed)?;
        ok &= kd < base;
        parts.push(format!("{tag:?} distilled {kd:.2} < untrained {base:.2}"));
    }
    ensure(ok, parts.join("; "))
}

// ---------------------------------------------------------------- determinism

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 7;
    cfg.out_dir = out.join("runs");
    cfg.data.dir = Some(out.join("data"));
    cfg.data.synth.participants = 12;
    cfg.data.synth.segments = 4;
    cfg.data.synth.duration_s = 10.0;
    cfg.data.synth.seed = 3;
    cfg.encoder = EncoderSection { token_dim: 16, n_layers: 1, n_heads: 2, mlp_hidden: 32, ..EncoderSection::default() };
    let optim = OptimConfig { steps: 6, batch_size: 8, max_lr: 1e-3, warmup_iters: 2, ..OptimConfig::default() };
    cfg.mae.optim = optim.clone();
    cfg.mae.decoder_layers = 1;
    cfg.distill.optim = optim.clone();
    cfg.distill.head_hidden = 32;
    cfg.distill.head_out = 16;
    cfg.eval.pool_participants = 2;
    cfg.eval.n_pools = 5;
    cfg.eval.supervised.optim = optim;
    cfg
}

fn criterion_determinism(_: &mut Desk) -> Check {
    std::env::set_var("BCG_DETERMINISTIC", "1");
    if !bcg_tensor::deterministic_from_env() {
        return Err("BCG_DETERMINISTIC=1 did not enable deterministic kernels".into());
    }
    let mut parts = Vec::new();
    let mut ok = true;
    for recipe in ["retrieval", "label-sweep"] {
        let mut csv = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(fail)?;
            let cfg = small_config(dir.path());
            run_recipe(recipe, &cfg).map_err(fail)?;
            csv.push(std::fs::read(cfg.out_dir.join(recipe).join("metrics.csv")).map_err(fail)?);
        }
        let same = csv[0] == csv[1] && !csv[0].is_empty();
        ok &= same;
        let rows = csv[0].iter().filter(|&&b| b == b'\n').count();
        parts.push(format!("{recipe}: {rows} lines {}", if same { "identical" } else { "differ" }));
    }
    ensure(ok, parts.join("; "))
}

// ---------------------------------------------------------------- driver

type Criterion = fn(&mut Desk) -> Check;

fn main() {
    let _ = env_logger::builder().is_test(false).try_init();
    let criteria: [(u32, &str, Criterion); 10] = [
        (1, "autodiff gradcheck", criterion_autodiff),
        (2, "exact-formula oracles", criterion_formulas),
        (3, "masking contract", criterion_masking),
        (4, "retrieval chance calibration", criterion_chance),
        (5, "procrustes recovery", criterion_procrustes),
        (6, "cross-modal retrieval after distillation", criterion_distillation_signal),
        (7, "HR probe ordering", criterion_probe_ordering),
        (8, "frozen-teacher ablation direction", criterion_frozen_teacher),
        (9, "compressed students and size table", criterion_compression),
        (10, "recipe determinism", criterion_determinism),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("BCG_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut desk = Desk::default();
    let mut results: BTreeMap<u32, bool> = BTreeMap::new();
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut desk))).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (verdict, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {verdict} {name} [{secs:.1}s]: {detail}");
        results.insert(n, outcome.is_ok());
    }
    let failed: Vec<String> = results.iter().filter(|(_, ok)| !**ok).map(|(n, _)| n.to_string()).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
