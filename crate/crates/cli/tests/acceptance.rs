//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines appear in plain
//! `cargo test` output. The desk-scale training criterion takes about an
//! hour on one core and only runs when `HARMONIZE_DESK=1` is set.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use harmonize_core::gradcheck::grad_check;
use harmonize_core::guided_filter::{guided_filter, guided_filter_bruteforce, FilterConfig};
use harmonize_core::illumination::{
    coeff_count, project_to_sh, reconstruct_illum_map, sh_basis, ShCoefficients,
};
use harmonize_core::networks::{compose_local, ArchConfig};
use harmonize_core::ops::psnr_where;
use harmonize_core::stm::{
    estimate_homography, inverse_warp_compose, region_mask, warp, warp_on, Quad, Region,
};
use harmonize_core::synth_data::{gen_scene, load_rgb, load_rgba, save_png, DataConfig};
use harmonize_core::training::{
    generator_objective_on, global_adv_losses, identity_loss, local_adv_losses, prepare_all,
    total_losses, LossParts, LossWeights, TrainConfig, TrainState,
};
use harmonize_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn guided_filter_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let c = random_tensor(&[2, 16, 16], &mut r);
        let s = random_tensor(&[2, 16, 16], &mut r);
        let cfg = FilterConfig::new(i % 5, r.gen_range(1e-4..1.0)).map_err(|e| e.to_string())?;
        let fast = guided_filter(&c, &s, cfg).map_err(|e| e.to_string())?;
        let slow = guided_filter_bruteforce(&c, &s, cfg).map_err(|e| e.to_string())?;
        worst = worst.max(fast.max_abs_diff(&slow).map_err(|e| e.to_string())?);
    }
    let t = start.elapsed();
    check(
        worst <= 1e-10 && t < Duration::from_secs(5),
        format!("max |fast - brute force| = {worst:.2e} (tol 1e-10), {t:.2?} (limit 5 s)"),
    )
}

fn sh_correctness() -> Outcome {
    let start = Instant::now();
    // Stratified sphere samples: 1000 x 1000 cells in (cos theta, phi).
    let (nu, nphi) = (1000usize, 1000usize);
    let m = coeff_count(3);
    let mut gram = vec![0.0; m * m];
    let mut r = rng(2);
    let weight = 4.0 * PI / (nu * nphi) as f64;
    for i in 0..nu {
        for j in 0..nphi {
            let u = -1.0 + 2.0 * (i as f64 + r.gen::<f64>()) / nu as f64;
            let phi = 2.0 * PI * (j as f64 + r.gen::<f64>()) / nphi as f64;
            let s = (1.0 - u * u).max(0.0).sqrt();
            let b = sh_basis([s * phi.cos(), s * phi.sin(), u], 3).map_err(|e| e.to_string())?;
            for a in 0..m {
                for c in a..m {
                    gram[a * m + c] += b[a] * b[c] * weight;
                }
            }
        }
    }
    let mut gram_err: f64 = 0.0;
    for a in 0..m {
        for c in a..m {
            let target = if a == c { 1.0 } else { 0.0 };
            gram_err = gram_err.max((gram[a * m + c] - target).abs());
        }
    }
    let mut coeffs = [Vec::new(), Vec::new(), Vec::new()];
    for ch in &mut coeffs {
        *ch = (0..coeff_count(2))
            .map(|_| r.gen_range(-1.0..1.0))
            .collect();
    }
    let c = ShCoefficients::new(2, coeffs).map_err(|e| e.to_string())?;
    let map = reconstruct_illum_map(&c, 256, 512).map_err(|e| e.to_string())?;
    let back = project_to_sh(&map, 2).map_err(|e| e.to_string())?;
    let trip = c
        .flat()
        .iter()
        .zip(back.flat())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let t = start.elapsed();
    check(
        gram_err <= 2e-3 && trip <= 1e-3 && t < Duration::from_secs(30),
        format!(
            "Gram error {gram_err:.2e} (tol 2e-3), round trip {trip:.2e} at 256x512 (tol 1e-3), {t:.2?} (limit 30 s)"
        ),
    )
}

fn homography_and_warp() -> Outcome {
    let mut r = rng(3);
    let quad = |r: &mut ChaCha8Rng| {
        let j = 0.25;
        let base = [[-0.6, 0.6], [0.6, 0.6], [0.6, -0.6], [-0.6, -0.6]];
        Quad::new(base.map(|[x, y]| [x + r.gen_range(-j..j), y + r.gen_range(-j..j)]))
    };
    let mut residual: f64 = 0.0;
    for _ in 0..100 {
        let (src, dst) = (quad(&mut r).unwrap(), quad(&mut r).unwrap());
        let h = estimate_homography(&src, &dst).map_err(|e| e.to_string())?;
        for (&[x, y], &[u, v]) in src.vertices().iter().zip(dst.vertices()) {
            let (px, py) = h.apply(x, y).ok_or("vertex maps to infinity")?;
            residual = residual.max((px - u).abs().max((py - v).abs()));
        }
    }

    // A rendered scene background serves as the natural image.
    let img = gen_scene(4, &DataConfig::default())
        .map_err(|e| e.to_string())?
        .bg;
    let n = img.shape()[1];
    let region = Region::new([[-0.6, 0.5], [0.55, 0.6], [0.5, -0.55], [-0.5, -0.6]])
        .map_err(|e| e.to_string())?;
    let h = estimate_homography(region.quad(), &Quad::full_square()).map_err(|e| e.to_string())?;
    let there = warp(&img, &h, n, n).map_err(|e| e.to_string())?;
    let back =
        warp(&there, &h.inverse().map_err(|e| e.to_string())?, n, n).map_err(|e| e.to_string())?;
    let mask = region_mask(&region, n, n);
    let interior = |i: usize| {
        let p = i % (n * n);
        let (y, x) = (p / n, p % n);
        (y.saturating_sub(1)..=(y + 1).min(n - 1)).all(|yy| {
            (x.saturating_sub(1)..=(x + 1).min(n - 1)).all(|xx| mask.data()[yy * n + xx] == 1.0)
        })
    };
    let psnr = psnr_where(&back, &img, 2.0, interior).map_err(|e| e.to_string())?;

    let local = random_tensor(&[3, 32, 32], &mut r);
    let (global, m) = inverse_warp_compose(&img, &local, &region).map_err(|e| e.to_string())?;
    let plane = n * n;
    let changed = (0..global.len())
        .filter(|&i| {
            m.data()[i % plane] == 0.0 && global.data()[i].to_bits() != img.data()[i].to_bits()
        })
        .count();
    check(
        residual <= 1e-9 && psnr > 35.0 && changed == 0,
        format!(
            "vertex residual {residual:.2e} (tol 1e-9), round-trip interior PSNR {psnr:.1} dB (> 35), {changed} background pixels altered outside the mask"
        ),
    )
}

fn differentiability() -> Outcome {
    let start = Instant::now();
    let mut r = rng(5);
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, rep: harmonize_core::GradCheckReport, tol: f64| {
        ok &= rep.pass;
        lines.push(format!("{name} {:.1e}/{tol:.0e}", rep.max_rel_err));
    };

    let kernel = random_tensor(&[3, 2, 3, 3], &mut r);
    let input = random_tensor(&[2, 7, 6], &mut r);
    let k2 = kernel.clone();
    record(
        "conv2d",
        grad_check(
            move |t: &mut Tape, x| {
                let k = t.constant(k2.clone());
                let y = t.conv2d(x, k, 2, 1)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &input,
            1e-6,
            1e-4,
        ),
        1e-4,
    );
    let weights = random_tensor(&[2, 7, 6], &mut r);
    let w2 = weights.clone();
    record(
        "box_filter",
        grad_check(
            move |t: &mut Tape, x| {
                let y = t.box_filter(x, 2)?;
                let w = t.constant(w2.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &input,
            1e-6,
            1e-4,
        ),
        1e-4,
    );
    let style = random_tensor(&[2, 7, 6], &mut r);
    let (s2, w3) = (style.clone(), weights.clone());
    record(
        "guided_filter",
        grad_check(
            move |t: &mut Tape, x| {
                let s = t.constant(s2.clone());
                let cfg = FilterConfig::new(2, 0.05)?;
                let y = harmonize_core::guided_filter::guided_filter_on(t, x, s, cfg)?;
                let w = t.constant(w3.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &input,
            1e-6,
            1e-4,
        ),
        1e-4,
    );
    let region = Region::new([[-0.5, 0.45], [0.3, 0.5], [0.35, -0.4], [-0.45, -0.5]]).unwrap();
    let h = estimate_homography(&Quad::full_square(), region.quad()).unwrap();
    let img = random_tensor(&[2, 8, 8], &mut r);
    let ww = random_tensor(&[2, 12, 12], &mut r);
    record(
        "warp",
        grad_check(
            move |t: &mut Tape, x| {
                let y = warp_on(t, x, &h, 12, 12)?;
                let w = t.constant(ww.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &img,
            1e-6,
            1e-4,
        ),
        1e-4,
    );
    let other = random_tensor(&[3, 8, 8], &mut r);
    let mask = Arc::new(Tensor::from_fn(&[1, 8, 8], |i| {
        ((i % 8) as f64 / 7.0).min(1.0)
    }));
    let wc = random_tensor(&[3, 8, 8], &mut r);
    let xs = random_tensor(&[3, 8, 8], &mut r);
    record(
        "compose_local",
        grad_check(
            move |t: &mut Tape, x| {
                let o = t.constant(other.clone());
                let y = compose_local(t, x, o, mask.clone())?;
                let w = t.constant(wc.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &xs,
            1e-6,
            1e-4,
        ),
        1e-4,
    );

    // End to end on a 32x32 scene with a 16x16 patch: generator, inverse
    // warp and both critics.
    let data = DataConfig {
        global_size: 32,
        local_size: 16,
        sprite_size: 8,
        distractor_height: [0.2, 0.3],
        ..DataConfig::default()
    };
    let cfg = TrainConfig {
        seed: 12,
        local_size: 16,
        global_size: 32,
        arch: ArchConfig {
            enc_channels: [4, 6, 8],
            critic_channels: [4, 6, 8],
            ..ArchConfig::default()
        },
        ..TrainConfig::default()
    };
    let scenes = prepare_all(
        vec![gen_scene(100, &data).map_err(|e| e.to_string())?],
        &cfg.arch,
    )
    .map_err(|e| e.to_string())?;
    let p = &scenes[0];
    let st = TrainState::new(cfg.clone()).map_err(|e| e.to_string())?;
    let idt = st
        .generator
        .forward(&p.identity_input)
        .map_err(|e| e.to_string())?
        .x_h;
    let nearest = idt
        .data()
        .iter()
        .zip(p.sample.y.data())
        .map(|(a, b)| (a - b).abs())
        .fold(f64::MAX, f64::min);
    if nearest < 1e-4 {
        return Err(format!(
            "end-to-end instance sits on an L1 kink ({nearest:.1e})"
        ));
    }
    for name in ["enc1.w", "shadow_out.w", "texture_out.b", "content_proj.w"] {
        let (st, arch, w) = (&st, &cfg.arch, cfg.weights);
        let x = st.generator.params.get(name).unwrap().clone();
        let rep = grad_check(
            move |tape: &mut Tape, v| {
                let g = st.generator.params.bind_replacing(tape, name, v)?;
                let dl = st.local_critic.params.bind(tape, false);
                let dg = st.global_critic.params.bind(tape, false);
                let input = p.input.bind(tape);
                Ok(generator_objective_on(tape, &g, &dl, &dg, arch, &w, p, &input)?.0)
            },
            &x,
            1e-6,
            1e-3,
        );
        record(&format!("end-to-end[{name}]"), rep, 1e-3);
    }
    let t = start.elapsed();
    ok &= t < Duration::from_secs(120);
    check(ok, format!("{}; {t:.2?} (limit 2 min)", lines.join(", ")))
}

fn loss_algebra() -> Outcome {
    let mut notes = Vec::new();
    let near = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    let (d, g) = local_adv_losses(&[0.3; 4], &[0.8; 4]).map_err(|e| e.to_string())?;
    let mut ok = near(d, -0.5) && near(g, -0.3);
    let (d, g) = global_adv_losses(&[-0.2; 4], &[0.1; 4]).map_err(|e| e.to_string())?;
    ok &= near(d, -0.3) && near(g, 0.2);
    ok &= local_adv_losses(&[0.5, 0.1], &[0.1, 0.5])
        .map_err(|e| e.to_string())?
        .0
        == 0.0;
    ok &= local_adv_losses(&[], &[1.0]).is_err();
    let y = Tensor::from_fn(&[3, 4, 4], |i| (i as f64).cos());
    ok &= identity_loss(&y, &y).unwrap() == 0.0;
    ok &= near(identity_loss(&y.map(|v| v + 0.5), &y).unwrap(), 0.5);
    let unit = LossWeights {
        lambda_g: 1.0,
        lambda_g_idt: 1.0,
        lambda_d_g: 1.0,
        ..LossWeights::default()
    };
    let parts = LossParts {
        l_g_l: 1.0,
        l_g_g: 2.0,
        l_s_idt: 3.0,
        ..LossParts::default()
    };
    ok &= total_losses(&parts, &unit).unwrap().0 == 6.0;
    let zero = LossWeights {
        lambda_g: 0.0,
        lambda_g_idt: 0.0,
        ..unit
    };
    ok &= total_losses(&parts, &zero).unwrap().0 == 1.0;
    notes.push(format!(
        "unit examples {}",
        if ok { "exact" } else { "MISMATCH" }
    ));

    let mut r = rng(6);
    let mut lin: f64 = 0.0;
    for _ in 0..1000 {
        let p = LossParts {
            l_d_l: r.gen_range(-3.0..3.0),
            l_g_l: r.gen_range(-3.0..3.0),
            l_d_g: r.gen_range(-3.0..3.0),
            l_g_g: r.gen_range(-3.0..3.0),
            l_s_idt: r.gen_range(0.0..3.0),
        };
        let w = LossWeights {
            lambda_g: r.gen_range(0.0..5.0),
            lambda_g_idt: r.gen_range(0.0..5.0),
            lambda_d_g: r.gen_range(0.0..5.0),
            ..LossWeights::default()
        };
        let k = r.gen_range(0.0..10.0);
        let (g0, d0) = total_losses(&p, &w).unwrap();
        let (g1, _) = total_losses(
            &p,
            &LossWeights {
                lambda_g: k * w.lambda_g,
                ..w
            },
        )
        .unwrap();
        let (g2, _) = total_losses(
            &p,
            &LossWeights {
                lambda_g_idt: k * w.lambda_g_idt,
                ..w
            },
        )
        .unwrap();
        let (g3, d3) = total_losses(
            &p,
            &LossWeights {
                lambda_d_g: k * w.lambda_d_g,
                ..w
            },
        )
        .unwrap();
        lin = lin
            .max((g1 - g0 - (k - 1.0) * w.lambda_g * p.l_g_g).abs())
            .max((g2 - g0 - (k - 1.0) * w.lambda_g_idt * p.l_s_idt).abs())
            .max((d3 - d0 - (k - 1.0) * w.lambda_d_g * p.l_d_g).abs())
            .max((g3 - g0).abs());
    }
    ok &= lin <= 1e-12;
    notes.push(format!("lambda linearity {lin:.1e} (tol 1e-12)"));

    let data = DataConfig {
        global_size: 32,
        local_size: 16,
        sprite_size: 8,
        distractor_height: [0.2, 0.3],
        ..DataConfig::default()
    };
    let cfg = TrainConfig {
        seed: 7,
        local_size: 16,
        global_size: 32,
        steps: 5,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let scenes = prepare_all(
        (0..4).map(|s| gen_scene(s, &data).unwrap()).collect(),
        &cfg.arch,
    )
    .map_err(|e| e.to_string())?;
    let mut st = TrainState::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    st.train(&scenes, |rep| {
        worst = worst.max(rep.max_critic_weight);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    ok &= worst <= cfg.weights.clip_c;
    notes.push(format!(
        "max critic weight after {} critic updates {worst:.4} (clip {})",
        cfg.steps as usize * cfg.weights.d_steps_per_g,
        cfg.weights.clip_c
    ));
    check(ok, notes.join(", "))
}

fn harmonize_bin() -> &'static str {
    env!("CARGO_BIN_EXE_harmonize")
}

fn run(args: &[&str]) -> Result<(), String> {
    let out = Command::new(harmonize_bin())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`harmonize {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Every file under `dir` with its bytes, in sorted order.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(root: &Path) -> Result<(), String> {
    let corpus = root.join("corpus");
    let run_dir = root.join("run");
    run(&["gen-data", "--n", "4", "--out", s(&corpus), "--seed", "21"])?;
    run(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&run_dir),
        "--seed",
        "3",
        "--set",
        "steps=10",
        "--set",
        "batch_size=2",
    ])?;
    let scene = corpus.join("scene_21");
    let rgba = load_rgba(&scene.join("fg.png")).map_err(|e| e.to_string())?;
    let alpha = rgba.channels(3, 4).map_err(|e| e.to_string())?;
    save_png(&root.join("fg_mask.png"), &alpha).map_err(|e| e.to_string())?;
    let ckpt = run_dir.join("checkpoint.bin");
    run(&[
        "compose",
        "--ckpt",
        s(&ckpt),
        "--bg",
        s(&scene.join("bg.png")),
        "--fg",
        s(&scene.join("fg.png")),
        "--mask",
        s(&root.join("fg_mask.png")),
        "--region",
        s(&scene.join("region.json")),
        "--sh",
        s(&scene.join("sh.json")),
        "--out",
        s(&root.join("composed")),
    ])?;
    run(&[
        "compose",
        "--ckpt",
        s(&ckpt),
        "--bg",
        s(&scene.join("bg.png")),
        "--fg",
        s(&scene.join("fg.png")),
        "--region",
        s(&scene.join("region.json")),
        "--sh",
        s(&scene.join("sh.json")),
        "--out",
        s(&root.join("composed_alpha")),
    ])?;
    run(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--out",
        s(&root.join("metrics.json")),
    ])
}

fn cli_end_to_end() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let identical = sa == sb;
    let alpha_default =
        snapshot(&a.path().join("composed")) == snapshot(&a.path().join("composed_alpha"));

    let csv =
        std::fs::read_to_string(a.path().join("run/losses.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let finite = rows.iter().all(|r| {
        r.split(',')
            .skip(1)
            .all(|v| v.parse::<f64>().is_ok_and(f64::is_finite))
    });
    let metrics: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(a.path().join("metrics.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let violations = metrics["mask_partition_violations"].as_u64();

    // A zero-initialized generator leaves the background untouched outside
    // the region.
    let z = a.path().join("zero");
    run(&[
        "train",
        "--corpus",
        s(&a.path().join("corpus")),
        "--out",
        s(&z),
        "--set",
        "steps=0",
        "--set",
        "arch.init=\"zero\"",
    ])?;
    let scene = a.path().join("corpus/scene_21");
    run(&[
        "compose",
        "--ckpt",
        s(&z.join("checkpoint.bin")),
        "--bg",
        s(&scene.join("bg.png")),
        "--fg",
        s(&scene.join("fg.png")),
        "--mask",
        s(&a.path().join("fg_mask.png")),
        "--region",
        s(&scene.join("region.json")),
        "--sh",
        s(&scene.join("sh.json")),
        "--out",
        s(&z.join("composed")),
    ])?;
    let bg = load_rgb(&scene.join("bg.png")).map_err(|e| e.to_string())?;
    let global = load_rgb(&z.join("composed/global.png")).map_err(|e| e.to_string())?;
    let region: Region = serde_json::from_str(
        &std::fs::read_to_string(scene.join("region.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let n = bg.shape()[1];
    let mask = region_mask(&region, n, n);
    let outside_changed = (0..bg.len())
        .filter(|&i| mask.data()[i % (n * n)] == 0.0 && bg.data()[i] != global.data()[i])
        .count();

    check(
        identical && alpha_default && rows.len() == 10 && finite && violations == Some(0) && outside_changed == 0,
        format!(
            "gen-data -> train(10) -> compose -> eval exit 0; {} files byte-identical across two runs: {identical}; mask defaulting to fg alpha matches: {alpha_default}; {} finite CSV rows: {finite}; partition violations {violations:?}; zero-init global.png differs from bg outside the mask at {outside_changed} values",
            sa.len(),
            rows.len()
        ),
    )
}

fn desk_scale() -> Option<Outcome> {
    if std::env::var("HARMONIZE_DESK").ok().as_deref() != Some("1") {
        return None;
    }
    Some(desk_scale_run())
}

fn desk_scale_run() -> Outcome {
    let steps: u64 = std::env::var("HARMONIZE_DESK_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(20_000);
    let keep = std::env::var("HARMONIZE_DESK_DIR").ok().map(PathBuf::from);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    let (train, held, run_dir) = (root.join("train"), root.join("heldout"), root.join("run"));
    let start = Instant::now();
    run(&["gen-data", "--n", "2000", "--out", s(&train), "--seed", "0"])?;
    run(&[
        "gen-data",
        "--n",
        "100",
        "--out",
        s(&held),
        "--seed",
        "1000000",
    ])?;
    let steps_arg = format!("steps={steps}");
    run(&[
        "train",
        "--corpus",
        s(&train),
        "--out",
        s(&run_dir),
        "--seed",
        "0",
        "--set",
        &steps_arg,
    ])?;
    let elapsed = start.elapsed();
    let metrics_path = root.join("heldout_metrics.json");
    run(&[
        "eval",
        "--ckpt",
        s(&run_dir.join("checkpoint.bin")),
        "--corpus",
        s(&held),
        "--out",
        s(&metrics_path),
    ])?;
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics_path).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let idt = m["identity_loss_mean"].as_f64().unwrap_or(f64::NAN);
    let median = m["shadow_angle_median_deg"].as_f64().unwrap_or(f64::NAN);
    let detected = m["detected_fraction"].as_f64().unwrap_or(0.0);

    let csv = std::fs::read_to_string(run_dir.join("losses.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let finite = rows.len() as u64 == steps
        && rows.iter().all(|r| {
            r.split(',')
                .skip(1)
                .all(|v| v.parse::<f64>().is_ok_and(f64::is_finite))
        });

    // Reproducibility: replay the opening steps from scratch.
    let replay = root.join("replay");
    run(&[
        "train",
        "--corpus",
        s(&train),
        "--out",
        s(&replay),
        "--seed",
        "0",
        "--set",
        "steps=50",
    ])?;
    let again = std::fs::read_to_string(replay.join("losses.csv")).map_err(|e| e.to_string())?;
    let reproducible = again.lines().skip(1).eq(rows.iter().take(50).copied());

    let a = idt < 0.05;
    let b = median < 20.0 && detected >= 0.7;
    let tag = |ok: bool| if ok { "ok" } else { "FAILED" };
    check(
        a && b && finite && reproducible,
        format!(
            "{steps} steps in {elapsed:.0?}; (a) held-out identity loss {idt:.4} (< 0.05) {}; (b) median shadow error {median:.1} deg (< 20) with {:.0}% detected (>= 70%) {}; (c) all {} loss rows finite {}; (d) first 50 steps replay bit-identical {}",
            tag(a),
            detected * 100.0,
            tag(b),
            rows.len(),
            tag(finite),
            tag(reproducible)
        ),
    )
}

fn main() {
    // Ignore libtest-style arguments such as `--nocapture` or filters.
    let criteria: Vec<(&str, Box<dyn Fn() -> Option<Outcome>>)> = vec![
        (
            "1 guided-filter oracle equivalence",
            Box::new(|| Some(guided_filter_oracle())),
        ),
        (
            "2 spherical-harmonics correctness",
            Box::new(|| Some(sh_correctness())),
        ),
        (
            "3 homography and warp",
            Box::new(|| Some(homography_and_warp())),
        ),
        (
            "4 differentiability suite",
            Box::new(|| Some(differentiability())),
        ),
        ("5 loss algebra", Box::new(|| Some(loss_algebra()))),
        ("6 desk-scale training", Box::new(desk_scale)),
        ("7 CLI end to end", Box::new(|| Some(cli_end_to_end()))),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Some(Ok(detail)) => println!("criterion {name}: PASS ({detail})"),
            Some(Err(detail)) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
            None => println!(
                "criterion {name}: SKIPPED (about an hour on one core; run with HARMONIZE_DESK=1)"
            ),
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
