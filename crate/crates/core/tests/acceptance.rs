//! One PASS/FAIL line per acceptance criterion.
//!
//! Run with `cargo test -p psg-core --test acceptance -- --nocapture` to see the
//! report. Every criterion is asserted except the wall-clock budget of the
//! overfit run, which depends on the machine and is only reported.

mod common;

use std::fs;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psg_core::data::synthetic::synthetic_triplets;
use psg_core::illumination::{lit_up, IlluminationEstimator, IlluminationEstimatorConfig, IlluminationMap};
use psg_core::image::ImageTensor;
use psg_core::losses::{
    itss_from_embeddings, itss_tensor, perceptual_tensor, ssim_loss, total_loss, FrozenConvNet, FrozenImageEncoder,
    LossBackends, LossWeights, PerceptualBackend,
};
use psg_core::metrics::{psnr, ssim_metric};
use psg_core::nn::gradcheck::{check_gradients, zero_gradient_params, GradCheck};
use psg_core::nn::{normalize_last, ParamStore};
use psg_core::pipeline::{
    enhance, evaluate, evaluate_model, load_checkpoint, mean_psnr, save_checkpoint, train_on, Ablation,
    AblationFlags, CheckpointMeta, PsgNet,
};
use psg_core::restorer::{
    apply_film, make_mask, CrossAttentionFilm, FuseBlock, ModulationParams, Restorer, RestorerConfig,
    RestorerVariant, Sged,
};
use psg_core::text_align::TextEmbedding;

use common::tiny_config;

struct Report {
    lines: Vec<(bool, bool, String)>,
}

impl Report {
    fn new() -> Self {
        Self { lines: Vec::new() }
    }

    fn check(&mut self, pass: bool, what: &str, detail: String) {
        self.record(pass, true, what, detail);
    }

    /// Reported but not asserted.
    fn observe(&mut self, pass: bool, what: &str, detail: String) {
        self.record(pass, false, what, detail);
    }

    fn record(&mut self, pass: bool, enforced: bool, what: &str, detail: String) {
        let line = format!("{} {what}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, enforced, line));
    }

    fn finish(self) {
        let failed: Vec<_> = self.lines.iter().filter(|(p, e, _)| !p && *e).map(|l| l.2.clone()).collect();
        assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
    }
}

fn pattern(shape: (usize, usize, usize, usize), offset: usize) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|i| 0.1 + 0.8 * (((i + offset) * 53) % 97) as f64 / 96.0).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn text_rows(b: usize, d: usize) -> Tensor {
    let v: Vec<f64> = (0..b * d).map(|i| ((i * 29) % 13) as f64 / 13.0 - 0.5).collect();
    Tensor::from_vec(v, (b, d), &Device::Cpu).unwrap()
}

fn worst(checks: &[GradCheck]) -> f64 {
    checks.iter().map(GradCheck::rel_error).fold(0.0, f64::max)
}

fn lit_identity(r: &mut Report) {
    let store = ParamStore::cpu(3);
    let cfg = IlluminationEstimatorConfig {
        scales: vec![4, 8, 16],
        embed_dim: 8,
        attention_heads: 2,
    };
    let ie = IlluminationEstimator::new(&store.root(), &cfg).unwrap();
    ie.set_averaging_fusion(&store).unwrap();
    let mut exact = true;
    for t in synthetic_triplets(5, 32, 1).unwrap() {
        let img = t.raw;
        exact &= lit_up(&img, &IlluminationMap::ones(32, 32).unwrap()).unwrap().to_vec() == img.to_vec();
        let fused = ie.fuse_scales(&[img.clone(), img.clone(), img.clone()]).unwrap();
        exact &= fused.to_vec() == img.to_vec();
    }
    r.check(
        exact,
        "lit-up identity",
        "unit map and averaging fusion of identical scales reproduce the input bit for bit".into(),
    );
}

fn loss_vanishing(r: &mut Report) {
    let backends = LossBackends::toy(512, 16, DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let text = TextEmbedding::new((0..512).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap();
    let mut worst: f64 = 0.0;
    for t in synthetic_triplets(4, 64, 2).unwrap() {
        let b = total_loss(&t.reference, &t.reference, &text, &LossWeights::default(), &backends).unwrap();
        worst = worst.max(b.total.abs());
    }
    r.check(worst < 1e-6, "loss vanishes at the reference", format!("max |L| = {worst:.3e} (< 1e-6)"));
}

fn itss_properties(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dev = Device::Cpu;
    let d = 64;
    let (mut lo, mut hi, mut max_self, mut max_scale) = (f64::MAX, f64::MIN, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let mut vec = || -> Vec<f64> { (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect() };
        let (e, rf, t) = (vec(), vec(), vec());
        let s: Vec<f64> = (0..3).map(|_| 10f64.powf(rng.random::<f64>() * 6.0 - 3.0)).collect();
        let mk = |v: &[f64], k: f64| Tensor::from_vec(v.iter().map(|x| x * k).collect::<Vec<_>>(), (1, d), &dev).unwrap();
        let val = |a: &Tensor, b: &Tensor, c: &Tensor| itss_from_embeddings(a, b, c).unwrap().to_scalar::<f64>().unwrap();
        let v = val(&mk(&e, 1.0), &mk(&rf, 1.0), &mk(&t, 1.0));
        lo = lo.min(v);
        hi = hi.max(v);
        max_self = max_self.max(val(&mk(&e, 1.0), &mk(&e, 1.0), &mk(&t, 1.0)).abs());
        max_scale = max_scale.max((val(&mk(&e, s[0]), &mk(&rf, s[1]), &mk(&t, s[2])) - v).abs());
    }
    r.check(lo >= 0.0 && hi <= 2.0, "ITSS range", format!("1000 triples in [{lo:.4}, {hi:.4}] ⊂ [0, 2]"));
    r.check(max_self == 0.0, "ITSS zero at the reference", format!("max {max_self:e}"));
    r.check(max_scale <= 1e-6, "ITSS scale invariance", format!("max change {max_scale:.3e} (<= 1e-6)"));
}

fn mask_statistics(r: &mut Report) {
    let mut ok = true;
    let mut details = Vec::new();
    for theta in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
        let tol = 3.0 * (theta * (1.0 - theta)).sqrt() / 256.0;
        let z: Vec<f64> = (0..100).map(|s| make_mask(256, 256, theta, s).unwrap().zero_fraction()).collect();
        let mean = z.iter().sum::<f64>() / 100.0;
        let outside = z.iter().filter(|v| (**v - theta).abs() > tol).count();
        ok &= (mean - theta).abs() <= tol;
        details.push(format!("θ={theta}: mean {mean:.5}, {outside}/100 masks beyond ±{tol:.5}"));
    }
    let zeros = make_mask(256, 256, 0.0, 9).unwrap().values().iter().all(|&v| v == 1);
    let ones = make_mask(256, 256, 1.0, 9).unwrap().values().iter().all(|&v| v == 0);
    r.check(ok, "mask ratio statistics", details.join("; "));
    r.check(zeros && ones, "mask extremes", "θ=0 keeps every pixel, θ=1 drops every pixel".into());
}

fn modulation_identities(r: &mut Report) {
    let x = pattern((2, 8, 5, 6), 0).to_dtype(DType::F32).unwrap();
    let params = ModulationParams {
        gamma: Tensor::ones((2, 8), DType::F32, &Device::Cpu).unwrap(),
        beta: Tensor::zeros((2, 8), DType::F32, &Device::Cpu).unwrap(),
    };
    let y = apply_film(&x, &params).unwrap();
    let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    r.check(flat(&y) == flat(&x), "FiLM identity", "γ=1, β=0 returns the features bit for bit".into());

    let store = ParamStore::cpu(6);
    let fuse = FuseBlock::new(&store.root().pp("f"), 8, 16, 2, false).unwrap();
    for name in ["f.attn.out.weight", "f.attn.out.bias"] {
        let v = store.get(name).unwrap();
        store.assign(name, &v.zeros_like().unwrap()).unwrap();
    }
    let text = text_rows(2, 16).to_dtype(DType::F32).unwrap();
    let out = fuse.forward(&x, &text).unwrap();
    let tokens = x.flatten_from(2).unwrap().transpose(1, 2).unwrap().contiguous().unwrap();
    let ln = normalize_last(&tokens, 1e-5).unwrap().transpose(1, 2).unwrap().contiguous().unwrap().reshape((2, 8, 5, 6)).unwrap();
    r.check(
        flat(&out) == flat(&ln),
        "Fuse block identity",
        "zeroed output projection yields LayerNorm(input) bit for bit".into(),
    );
}

fn gradients(r: &mut Report) {
    let dev = Device::Cpu;
    let x = pattern((1, 3, 32, 32), 0);
    let w = pattern((1, 3, 32, 32), 7);

    let store = ParamStore::new(1, DType::F64, &dev);
    let ie = IlluminationEstimator::new(
        &store.root(),
        &IlluminationEstimatorConfig {
            scales: vec![4, 8],
            embed_dim: 8,
            attention_heads: 2,
        },
    )
    .unwrap();
    let loss = || Ok((ie.forward_batch(&x)?.0 * &w)?.sum_all()?);
    let names = [
        "scale4.stem_in.weight",
        "scale4.pos_embed",
        "scale4.block.attn.q.weight",
        "scale8.block.ffn.fc1.weight",
        "scale8.head.bias",
        "fusion.weight",
    ];
    let c = check_gradients(&store, &names, 1e-6, loss).unwrap();
    r.check(
        worst(&c) < 1e-2,
        "illumination estimator gradients",
        format!("{} parameters, max rel err {:.2e}", c.len(), worst(&c)),
    );
    let zero = zero_gradient_params(&store, &loss().unwrap()).unwrap();
    let mut all_nonzero = zero.is_empty();
    let mut trainable = store.named_trainable().len();

    let rcfg = RestorerConfig {
        base_channels: 4,
        depth: 2,
        share_branch_weights: false,
        attention_heads: 2,
    };
    let store = ParamStore::new(2, DType::F64, &dev);
    let sged = Sged::new(&store.root(), &rcfg, 6, RestorerVariant::default()).unwrap();
    let t = text_rows(1, 6);
    let loss = || Ok((sged.forward(&x, &t, true)? * &w)?.sum_all()?);
    let names = [
        "stem.weight",
        "enc0.tc.axial.row.q.weight",
        "enc0.tc.conv1.weight",
        "enc0.tc.bn1.weight",
        "enc1.fuse.attn.k.weight",
        "cfm.fc2.weight",
        "dec0.up.weight",
        "head.bias",
    ];
    let c = check_gradients(&store, &names, 1e-6, loss).unwrap();
    r.check(
        worst(&c) < 1e-2,
        "SGED gradients",
        format!("{} parameters, max rel err {:.2e}", c.len(), worst(&c)),
    );

    let store = ParamStore::new(3, DType::F64, &dev);
    let cfm = CrossAttentionFilm::new(&store.root(), 3, 6, 1).unwrap();
    let loss = || Ok((cfm.forward(&x, &t)? * &w)?.sum_all()?);
    let names = ["attn.q.weight", "attn.k.weight", "attn.v.bias", "attn.null_key", "fc1.weight", "fc2.weight"];
    let c = check_gradients(&store, &names, 1e-6, loss).unwrap();
    r.check(
        worst(&c) < 1e-2,
        "CFM gradients",
        format!("{} parameters, max rel err {:.2e}", c.len(), worst(&c)),
    );

    let store = ParamStore::new(4, DType::F64, &dev);
    let restorer = Restorer::new(&store.root(), &rcfg, 6, RestorerVariant::default()).unwrap();
    let mask = make_mask(32, 32, 0.5, 1).unwrap().to_tensor(DType::F64, &dev).unwrap();
    let out = restorer.forward(&x, &t, &mask, true).unwrap().enhanced;
    let loss = (out - &w).unwrap().sqr().unwrap().sum_all().unwrap();
    let zero_r = zero_gradient_params(&store, &loss).unwrap();
    all_nonzero &= zero_r.is_empty();
    trainable += store.named_trainable().len();
    r.check(
        all_nonzero,
        "every trainable parameter receives gradient",
        format!("{trainable} tensors checked, zero-gradient: {:?}", [zero, zero_r].concat()),
    );

    // Frozen loss networks built from trainable variables must still get no gradient.
    let var = |shape: &[usize], seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        candle_core::Var::from_tensor(
            &Tensor::from_vec((0..n).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>(), shape, &dev).unwrap(),
        )
        .unwrap()
    };
    let vars = [
        var(&[4, 3, 3, 3], 1),
        var(&[4], 2),
        var(&[8, 3, 4, 4], 3),
        var(&[8], 4),
        var(&[6, 8], 5),
        var(&[6], 6),
    ];
    let backend = PerceptualBackend::from_net(FrozenConvNet::from_stages(vec![(
        vars[0].as_tensor().clone(),
        vars[1].as_tensor().clone(),
        true,
    )]));
    let enc = FrozenImageEncoder::from_parts(
        vars[2].as_tensor().clone(),
        vars[3].as_tensor().clone(),
        vars[4].as_tensor().clone(),
        vars[5].as_tensor().clone(),
    )
    .unwrap();
    let input = var(&[1, 3, 16, 16], 7);
    let reference = pattern((1, 3, 16, 16), 3);
    let text = Tensor::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2], 6, &dev).unwrap();
    let l = (perceptual_tensor(input.as_tensor(), &reference, &backend).unwrap()
        + itss_tensor(input.as_tensor(), &reference, &text, &enc).unwrap())
    .unwrap();
    let grads = l.backward().unwrap();
    let frozen_zero = vars.iter().all(|v| {
        grads
            .get(v.as_tensor())
            .is_none_or(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() == 0.0)
    });
    let input_grad = grads.get(input.as_tensor()).is_some();
    r.check(
        frozen_zero && input_grad,
        "frozen backends receive no gradient",
        "perceptual and semantic encoders stay fixed while the input is differentiated".into(),
    );
}

fn metric_goldens(r: &mut Report) {
    // 192 of 300 values differ by 1/8: MSE = 192 / 64 / 300 = 0.01, PSNR = 20 dB.
    let a = ImageTensor::constant(0.25, 10, 10).unwrap();
    let v: Vec<f32> = (0..300).map(|i| if i < 192 { 0.375 } else { 0.25 }).collect();
    let b = ImageTensor::from_vec(v, 10, 10).unwrap();
    let p = psnr(&a, &b).unwrap();
    r.check((p - 20.0).abs() <= 1e-6, "PSNR golden value", format!("{p:.9} dB (20 ± 1e-6)"));

    let mut worst_self: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for t in synthetic_triplets(4, 32, 3).unwrap() {
        worst_self = worst_self.max((ssim_metric(&t.raw, &t.raw).unwrap() - 1.0).abs());
        let s = ssim_metric(&t.raw, &t.reference).unwrap() + ssim_loss(&t.raw, &t.reference).unwrap();
        worst_sum = worst_sum.max((s - 1.0).abs());
    }
    r.check(worst_self <= 1e-9, "SSIM identity", format!("max |ssim(x,x) − 1| = {worst_self:.2e}"));
    r.check(worst_sum <= 1e-9, "SSIM metric/loss complement", format!("max |metric + loss − 1| = {worst_sum:.2e}"));
}

fn ablations(r: &mut Report) {
    let mut variants: Vec<Vec<Ablation>> = vec![vec![]];
    variants.extend(Ablation::ALL.iter().map(|a| vec![*a]));
    let raw = &synthetic_triplets(1, 32, 4).unwrap()[0].raw;
    let mut built = 0;
    for flags in &variants {
        let mut cfg = tiny_config(32);
        cfg.ablation = AblationFlags::from_flags(flags);
        if PsgNet::build_variant(&cfg).and_then(|m| m.enhance_image(raw, None, 0)).is_ok() {
            built += 1;
        }
    }
    for theta in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mut cfg = tiny_config(32);
        cfg.mask_ratio = theta;
        if PsgNet::build_variant(&cfg).and_then(|m| m.enhance_image(raw, None, 0)).is_ok() {
            built += 1;
        }
    }
    let total = variants.len() + 5;
    r.check(
        built == total,
        "ablation variants construct",
        format!("{built}/{total} (full, six single flags, five mask ratios)"),
    );

    let mut cfg = tiny_config(32);
    cfg.ablation = AblationFlags::from_flags(&[Ablation::NoText]);
    let model = PsgNet::build_variant(&cfg).unwrap();
    let a = model.enhance_image(raw, Some("A sea turtle over a reef"), 0).unwrap().to_vec();
    let b = model.enhance_image(raw, Some("A diver near a wreck"), 0).unwrap().to_vec();
    r.check(a == b, "no_text ignores the description", "two captions give identical outputs".into());
}

fn determinism_and_round_trip(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_triplets(3, 32, 5).unwrap();
    let cfg = tiny_config(32);
    let a = train_on(&cfg, &data, &data, &dir.path().join("a")).unwrap();
    let b = train_on(&cfg, &data, &data, &dir.path().join("b")).unwrap();
    let logs_equal = fs::read(&a.log).unwrap() == fs::read(&b.log).unwrap();

    let img = dir.path().join("raw.png");
    data[0].raw.save(&img).unwrap();
    let (p1, p2) = (dir.path().join("e1.png"), dir.path().join("e2.png"));
    enhance(&a.best_checkpoint, &img, Some("A diver"), &p1, 0).unwrap();
    enhance(&b.best_checkpoint, &img, Some("A diver"), &p2, 0).unwrap();
    let png_equal = fs::read(&p1).unwrap() == fs::read(&p2).unwrap();
    r.check(
        logs_equal && png_equal,
        "determinism",
        format!("training logs identical: {logs_equal}; enhanced PNG bytes identical: {png_equal}"),
    );

    let manifest = psg_core::data::synthetic::write_synthetic_dataset(&dir.path().join("data"), 3, 32, 6).unwrap();
    let (model, meta) = load_checkpoint(&a.last_checkpoint).unwrap();
    let before = evaluate_model(&model, &manifest, &dir.path().join("m1")).unwrap();
    let saved = dir.path().join("resaved.psgc");
    save_checkpoint(&model, CheckpointMeta { ..meta }, &saved).unwrap();
    let after = evaluate(&saved, &manifest, &dir.path().join("m2")).unwrap();
    r.check(
        before == after,
        "checkpoint round trip",
        format!("metric reports equal over {} images", after.aggregates.count),
    );
}

fn overfit(r: &mut Report) {
    let mut cfg = tiny_config(64);
    cfg.lr = 1e-4;
    cfg.batch_size = 4;
    cfg.epochs = 500;
    cfg.eval_every = 500;
    cfg.seed = 0;
    cfg.model.illumination = IlluminationEstimatorConfig {
        scales: vec![4, 8, 16],
        embed_dim: 32,
        attention_heads: 4,
    };
    cfg.model.aligner = Default::default();
    cfg.model.itss_patch = 16;
    cfg.model.restorer = RestorerConfig {
        base_channels: 16,
        depth: 2,
        share_branch_weights: false,
        attention_heads: 2,
    };
    let data = synthetic_triplets(4, 64, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = train_on(&cfg, &data, &[], dir.path()).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let (model, _) = load_checkpoint(&out.last_checkpoint).unwrap();
    let p = mean_psnr(&model, &data).unwrap();
    r.check(
        p >= 28.0 && out.steps == 500,
        "overfit smoke test",
        format!("{} AdamW steps at lr 1e-4, train mean PSNR {p:.2} dB (>= 28)", out.steps),
    );
    let threads = rayon::current_num_threads();
    r.observe(
        minutes < 10.0,
        "overfit wall time",
        format!("{minutes:.1} min with {threads} thread(s) (budget 10 min on 4 cores; not asserted)"),
    );
}

#[test]
fn acceptance() {
    let mut r = Report::new();
    lit_identity(&mut r);
    loss_vanishing(&mut r);
    itss_properties(&mut r);
    mask_statistics(&mut r);
    modulation_identities(&mut r);
    gradients(&mut r);
    metric_goldens(&mut r);
    ablations(&mut r);
    determinism_and_round_trip(&mut r);
    overfit(&mut r);
    r.finish();
}
