//! Acceptance run: one PASS/FAIL line per criterion, each against its
//! tolerance and time budget. Runs without the libtest harness so the lines
//! are always printed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use radiomap_core::datapipe::{build_dataset, extract_frames, Dataset, DatasetConfig, Split};
use radiomap_core::raytrace::{load_coverage, simulate, CoverageGrid, PropagationConfig};
use radiomap_core::scene::{random_scene_with, RegionMap, Scene, SceneGenConfig, Transmitter};
use radiomap_core::trainer::{evaluate, evaluate_constant_mean, evaluate_indices, repeat_experiment, train, train_on, TrainConfig};
use radiomap_nn::gradcheck::{conv_equivalence, layer_gradient_checks};
use radiomap_nn::model::{radiounet, unet_si, DEFAULT_KERNEL_SET, RADIOUNET_RESOLUTIONS};
use radiomap_nn::{AdamConfig, ModelSpec};
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn free_cell_near(region: &RegionMap, x: usize, y: usize) -> (usize, usize) {
    (0..region.width() * region.height())
        .map(|i| (i % region.width(), i / region.width()))
        .filter(|&(cx, cy)| !region.is_building(cx, cy))
        .min_by_key(|&(cx, cy)| cx.abs_diff(x) + cy.abs_diff(y))
        .expect("region has a free cell")
}

fn sources_for(region: &RegionMap, placements: &[(usize, usize)]) -> Vec<(Scene, CoverageGrid)> {
    let cfg = PropagationConfig::for_grid(region.width(), region.height(), region.cell_size_m());
    placements
        .iter()
        .map(|&(x, y)| {
            let (tx, ty) = free_cell_near(region, x, y);
            let scene = Scene::new(region.clone(), vec![Transmitter::new(tx, ty)], "region").unwrap();
            let cov = simulate(&scene, &cfg).unwrap();
            (scene, cov)
        })
        .collect()
}

fn regions(count: u64, seed0: u64, buildings: usize, max_side: usize, placements: &[(usize, usize)]) -> Dataset {
    let gen = SceneGenConfig {
        min_side: 2,
        max_side: Some(max_side),
        ..SceneGenConfig::default()
    };
    let mut sources = Vec::new();
    for seed in seed0..seed0 + count {
        let base = random_scene_with(64, 64, buildings, seed, &gen).unwrap();
        for (scene, cov) in sources_for(base.region(), placements) {
            let scene = Scene::new(scene.region().clone(), scene.transmitters().to_vec(), format!("r{seed}")).unwrap();
            sources.push((scene, cov));
        }
    }
    build_dataset(&sources, &DatasetConfig::default()).unwrap()
}

fn gradient_correctness() -> Outcome {
    let results = layer_gradient_checks(20, 11).map_err(|e| e.to_string())?;
    let worst = results.iter().max_by(|a, b| a.error.total_cmp(&b.error)).unwrap();
    let mut layers: Vec<&str> = results.iter().map(|r| r.layer).collect();
    layers.sort();
    layers.dedup();
    for l in &layers {
        let n = results.iter().filter(|r| r.layer == *l).count();
        ensure(n >= 20, || format!("{l}: only {n} cases"))?;
    }
    ensure(worst.error < 1e-3, || format!("{} case {}: relative error {:e}", worst.layer, worst.case, worst.error))?;
    Ok(format!("{} checks over {} layer gradients, worst {:.2e} ({})", results.len(), layers.len(), worst.error, worst.layer))
}

fn conv_oracle() -> Outcome {
    let results = conv_equivalence(100, 21).map_err(|e| e.to_string())?;
    ensure(results.len() == 100, || format!("{} combos", results.len()))?;
    let worst = results.iter().max_by(|a, b| a.error.total_cmp(&b.error)).unwrap();
    ensure(worst.error < 1e-5, || format!("case {} error {:e}", worst.case, worst.error))?;
    let transposed = results.iter().filter(|r| r.transposed).count();
    Ok(format!("100 combos ({transposed} transposed), worst {:.2e}", worst.error))
}

fn architecture_audits() -> Outcome {
    let expected = [(37, (37, 13)), (65, (65, 23)), (73, (73, 23)), (91, (91, 31))];
    for (v, e) in expected {
        let got = unet_si(v, &DEFAULT_KERNEL_SET, 1.0, 2).map_err(|e| e.to_string())?.count_conv_layers();
        ensure(got == e, || format!("UNET-SI-{v}: {got:?}, expected {e:?}"))?;
    }
    let r = radiounet(2).map_err(|e| e.to_string())?;
    ensure(r.count_conv_layers().0 == 41, || format!("RadioUNET conv layers {:?}", r.count_conv_layers()))?;
    let trace: Vec<usize> = r.resolution_trace(256, 256).map_err(|e| e.to_string())?.iter().map(|(_, s)| *s).collect();
    ensure(trace == RADIOUNET_RESOLUTIONS, || format!("RadioUNET resolutions {trace:?}"))?;
    let p = r.count_params();
    ensure((3_500_000..=4_500_000).contains(&p), || format!("RadioUNET parameters {p}"))?;
    Ok(format!("UNET-SI conv counts match, RadioUNET 41 layers, {p} parameters"))
}

/// Windows admitted by the three filters, by direct enumeration.
fn brute_force_windows(scene: &Scene, s: usize, stride: usize, pad: usize) -> Vec<(usize, usize)> {
    let r = scene.region();
    let t = scene.transmitters()[0];
    let mut out = Vec::new();
    let mut oy = 0;
    while oy + s <= r.height() {
        let mut ox = 0;
        while ox + s <= r.width() {
            let buildings = (oy..oy + s).flat_map(|y| (ox..ox + s).map(move |x| (x, y))).filter(|&(x, y)| r.is_building(x, y)).count();
            let padded = t.x >= ox + pad && t.x + pad < ox + s && t.y >= oy + pad && t.y + pad < oy + s;
            if buildings > 0 && padded {
                out.push((ox, oy));
            }
            ox += stride;
        }
        oy += stride;
    }
    out
}

fn pipeline_fidelity() -> Outcome {
    let gen = SceneGenConfig {
        min_side: 3,
        max_side: Some(12),
        ..SceneGenConfig::default()
    };
    let region = random_scene_with(256, 256, 60, 4, &gen).unwrap().region().clone();
    let src = sources_for(&region, &[(128, 128), (40, 100), (200, 60), (90, 30)]);
    let mut kept_total = 0;
    for (scene, cov) in &src {
        let kept = extract_frames(cov, scene, 32, 3, 5).map_err(|e| e.to_string())?;
        let got: Vec<(usize, usize)> = kept.iter().map(|w| (w.origin_x, w.origin_y)).collect();
        ensure(got == brute_force_windows(scene, 32, 3, 5), || "kept windows differ from brute force".into())?;
        kept_total += kept.len();
    }
    let ds = build_dataset(&src, &DatasetConfig::default()).map_err(|e| e.to_string())?;
    let max_train = ds.frames.iter().filter(|f| f.split == Split::Train).map(|f| f.origin_x).max();
    let min_test = ds.frames.iter().filter(|f| f.split == Split::Test).map(|f| f.origin_x).min();
    let (Some(a), Some(b)) = (max_train, min_test) else {
        return Err("a split is empty".into());
    };
    ensure(b - a > 20, || format!("train/test origin_x separation {}", b - a))?;
    for f in &ds.frames {
        let occ = region.window(f.origin_x, f.origin_y, 32, 32);
        ensure(occ.iter().any(|&b| b), || format!("frame at ({}, {}) has no building", f.origin_x, f.origin_y))?;
        let (tx, ty) = f.transmitter_xy;
        ensure((5..27).contains(&tx) && (5..27).contains(&ty), || format!("transmitter at {:?} inside the padding", f.transmitter_xy))?;
    }
    Ok(format!(
        "{kept_total} windows re-verified, {} train / {} test frames, separation {}",
        ds.count(Split::Train),
        ds.count(Split::Test),
        b - a
    ))
}

fn oracle_physics() -> Outcome {
    let open = Scene::new(RegionMap::empty(64, 64), vec![Transmitter::new(32, 32)], "open").unwrap();
    let g = simulate(&open, &PropagationConfig::for_grid(64, 64, 1.0)).map_err(|e| e.to_string())?;
    let cells: Vec<(usize, usize)> = (1..=20).map(|i| (32 + i, 32 - i / 2)).collect();
    let mut worst = 0.0f64;
    for &(x, y) in &cells {
        let d = ((x as f64 - 32.0).powi(2) + (y as f64 - 32.0).powi(2)).sqrt().max(0.5);
        let fspl = 20.0 * d.log10() + 20.0 * 2.4e9f64.log10() + 20.0 * (4.0 * std::f64::consts::PI / 2.998e8).log10();
        worst = worst.max((g.at(x, y) as f64 - (46.99 - fspl)).abs());
    }
    ensure(worst < 0.1, || format!("path loss off by {worst:.3} dB"))?;

    let mut walled = RegionMap::empty(48, 48);
    walled.fill_rect(24, 0, 2, 48);
    let scene = Scene::new(walled, vec![Transmitter::new(10, 20)], "wall").unwrap();
    let cfg0 = PropagationConfig {
        max_reflections: 0,
        ..PropagationConfig::for_grid(48, 48, 1.0)
    };
    let g0 = simulate(&scene, &cfg0).map_err(|e| e.to_string())?;
    for y in 0..48 {
        for x in 26..48 {
            ensure(g0.at(x, y) == -100.0, || format!("blocked cell ({x},{y}) at {} dBm", g0.at(x, y)))?;
        }
    }

    let city = random_scene_with(64, 64, 18, 9, &SceneGenConfig::default()).unwrap();
    let mut prev: Option<CoverageGrid> = None;
    for k in 0..=6 {
        let cfg = PropagationConfig {
            max_reflections: k,
            ..PropagationConfig::for_grid(64, 64, 1.0)
        };
        let g = simulate(&city, &cfg).map_err(|e| e.to_string())?;
        if let Some(p) = &prev {
            let bad = p.power_dbm.iter().zip(&g.power_dbm).position(|(a, b)| b < a);
            ensure(bad.is_none(), || format!("cell {} lost power going to {k} reflections", bad.unwrap()))?;
        }
        prev = Some(g);
    }
    Ok(format!("20 distances within {worst:.4} dB, blocked half-plane at floor, reflections 0..6 monotone"))
}

fn learning_capability() -> Outcome {
    let ds = regions(24, 1000, 16, 10, &[(20, 32), (45, 30), (16, 18)]);
    let regions_used = {
        let mut ids: Vec<&str> = ds.frames.iter().map(|f| f.region_id.as_str()).collect();
        ids.dedup();
        ids.len()
    };
    ensure(ds.frames.len() >= 2000, || format!("only {} frames", ds.frames.len()))?;
    ensure(regions_used >= 20, || format!("only {regions_used} regions contribute frames"))?;
    let baseline = evaluate_constant_mean(&ds).map_err(|e| e.to_string())?.mae_dbm;
    let spec = unet_si(37, &DEFAULT_KERNEL_SET, 0.125, ds.channels()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 30,
        seed: 1,
        width_scale: 0.125,
        ..TrainConfig::for_frame_size(32)
    };
    let out = train(&spec, &ds, &cfg, None).map_err(|e| e.to_string())?;
    let mae = evaluate(&out.model, &ds, Split::Test).map_err(|e| e.to_string())?.mae_dbm;
    let ratio = mae / baseline;
    ensure(ratio < 0.6, || format!("test MAE {mae:.2} dB is {:.1}% of the constant-mean {baseline:.2} dB", ratio * 100.0))?;

    let small = regions(2, 0, 14, 8, &[(8, 30), (40, 20)]);
    let idx: Vec<usize> = small.split_indices(Split::Train).into_iter().take(8).collect();
    ensure(idx.len() == 8, || "fewer than 8 frames for the overfit run".into())?;
    let over_cfg = TrainConfig {
        batch_size: 2,
        max_epochs: 300,
        patience: 300,
        seed: 3,
        width_scale: 0.125,
        adam: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::for_frame_size(32)
    };
    let over = train_on(&spec, &small, &idx, &idx, &over_cfg, None).map_err(|e| e.to_string())?;
    let over_mae = evaluate_indices(&over.model, &small, &idx, 8).map_err(|e| e.to_string())?.mae_norm;
    ensure(over_mae < 0.01, || format!("overfit normalized MAE {over_mae:.4}"))?;
    Ok(format!(
        "{} frames / {regions_used} regions, test MAE {mae:.2} dB = {:.1}% of constant-mean {baseline:.2} dB \
         (best epoch {}, stopped {}); overfit MAE {over_mae:.4} at epoch {}",
        ds.frames.len(),
        ratio * 100.0,
        out.report.best_epoch,
        out.report.stopped_epoch,
        over.report.best_epoch
    ))
}

fn determinism() -> Outcome {
    let ds = regions(3, 50, 14, 8, &[(8, 30), (40, 20)]);
    let spec: ModelSpec = unet_si(37, &DEFAULT_KERNEL_SET, 0.125, ds.channels()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 3,
        width_scale: 0.125,
        ..TrainConfig::for_frame_size(32)
    };
    let a = repeat_experiment(&spec, &ds, &cfg, 2, 42).map_err(|e| e.to_string())?;
    let b = repeat_experiment(&spec, &ds, &cfg, 2, 42).map_err(|e| e.to_string())?;
    ensure(a.row.without_time() == b.row.without_time(), || format!("{:?} vs {:?}", a.row, b.row))?;
    for (x, y) in a.runs.iter().zip(&b.runs) {
        ensure(x.epochs == y.epochs, || "epoch traces differ".into())?;
    }
    Ok(format!("rows identical, MAE avg {:.3} dB", a.row.mae_average))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_radiomap"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().unwrap_or("null")).map_err(|e| format!("`{}` stdout: {e}", args[0]))
}

fn end_to_end_cli() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    run_cli(dir, &["generate", "--out-dir", "scenes", "--count", "8", "--size", "64", "--buildings", "14", "--max-side", "8", "--seed", "3"])?;
    let mut names: Vec<String> = std::fs::read_dir(dir.join("scenes"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for n in &names {
        let scene = format!("scenes/{n}");
        let raster = scene.replace(".json", ".rcov");
        run_cli(dir, &["simulate", "--scene", &scene, "--out", &raster, "--reflections", "6"])?;
    }
    let built = run_cli(
        dir,
        &["build-dataset", "--input-dir", "scenes", "--out", "ds.bin", "--frames", "32", "--stride", "3", "--padding", "5", "--floor-dbm", "-100", "--encoding", "two-binary"],
    )?;
    run_cli(
        dir,
        &["train", "--dataset", "ds.bin", "--model", "unet-si-37", "--width-scale", "0.125", "--batch", "16", "--epochs", "3", "--patience", "3", "--seed", "0", "--out", "model.ckpt", "--report", "report.json"],
    )?;
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?)
        .map_err(|e| format!("report.json: {e}"))?;
    ensure(report["row"]["model"] == "unet-si-37", || format!("report row {}", report["row"]))?;
    ensure(report["runs"][0]["epochs"].as_array().is_some_and(|e| !e.is_empty()), || "report has no epochs".into())?;
    let eval = run_cli(dir, &["eval", "--checkpoint", "model.ckpt", "--dataset", "ds.bin", "--split", "test", "--out", "eval.json"])?;
    let mae = eval["metrics"]["mae_dbm"].as_f64().ok_or("eval has no MAE")?;
    ensure(mae.is_finite(), || "eval MAE not finite".into())?;

    run_cli(dir, &["generate", "--out-dir", "query", "--count", "1", "--size", "32", "--buildings", "5", "--seed", "77"])?;
    run_cli(dir, &["predict", "--scene", "query/scene-0000.json", "--checkpoint", "model.ckpt", "--out", "pred.rcov", "--png", "pred.png"])?;
    let grid = load_coverage(dir.join("pred.rcov")).map_err(|e| format!("pred.rcov: {e}"))?;
    ensure((grid.width, grid.height) == (32, 32), || format!("raster {}x{}", grid.width, grid.height))?;
    let ceil = built["ceil_dbm"].as_f64().unwrap();
    ensure(
        grid.power_dbm.iter().all(|&v| v.is_finite() && v as f64 >= -100.0 - 1e-3 && v as f64 <= ceil + 1e-3),
        || "raster values outside the dataset range".into(),
    )?;
    let png = std::fs::read(dir.join("pred.png")).map_err(|e| e.to_string())?;
    ensure(png.starts_with(b"\x89PNG"), || "heatmap is not a PNG".into())?;
    Ok(format!("{} scenes, {} frames, test MAE {mae:.2} dB, 32x32 RCOV + PNG written", names.len(), built["frames"]))
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 8] = [
        ("gradient-correctness", 120, gradient_correctness),
        ("convolution-oracle", 60, conv_oracle),
        ("architecture-audits", 10, architecture_audits),
        ("pipeline-fidelity", 60, pipeline_fidelity),
        ("oracle-physics", 60, oracle_physics),
        ("learning-capability", 3600, learning_capability),
        ("determinism", 1200, determinism),
        ("end-to-end-cli", 4200, end_to_end_cli),
    ];
    let mut failed = 0;
    for (name, budget, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(_) if took > Duration::from_secs(budget) => Err(format!("took {:.1}s, budget {budget}s", took.as_secs_f64())),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{:.1}s]", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
