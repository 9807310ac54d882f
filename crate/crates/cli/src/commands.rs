use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use recon3d::campose::{
    orbit_eval_poses, random_viewpoints, zero123pp_targets, CameraRig, PoseSet, ViewpointRanges,
    EVAL_ORBIT_ELEVATIONS,
};
use recon3d::dataio::{
    filter_manifest, read_manifest, read_obj, read_poses, read_views_dir, render_gt, write_obj, write_views_dir,
    SceneSpec,
};
use recon3d::flexigrid::{build_grid, extract_mesh, ExtractionGrid};
use recon3d::mesh::Mesh;
use recon3d::metrics::{evaluate_geometry, psnr, ssim};
use recon3d::optfit::{fit_stage1, fit_stage2, write_trace_csv, FitConfig, ViewSet};
use recon3d::raster::{rasterize, shade_vertices};
use recon3d::triplane::{read_checkpoint, write_checkpoint, TriplaneField};

use crate::{Cli, Command, EvalArgs, ExtractArgs, FilterArgs, FitArgs, PosesArgs, Preset, Protocol, RenderArgs, Stage, SynthArgs};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Poses(a) => poses(cli, a),
        Command::Synth(a) => synth(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Extract(a) => extract(cli, a),
        Command::Render(a) => render(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Filter(a) => filter(cli, a),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Records the invocation next to the outputs.
fn write_run_json(cli: &Cli, dir: &Path, name: &str, seed: Option<u64>, extra: Value) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let record = json!({
        "command": name,
        "argv": std::env::args().collect::<Vec<_>>(),
        "threads": cli.threads,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "details": extra,
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn poses(cli: &Cli, a: &PosesArgs) -> Result<()> {
    let rig = CameraRig {
        radius: a.rig.radius,
        fov_deg: a.rig.fov,
        width: a.rig.size,
        height: a.rig.size,
    };
    let set = match a.protocol {
        Protocol::Zero123pp => zero123pp_targets(a.query_azimuth, &rig)?,
        Protocol::Orbit => orbit_eval_poses(a.n, &EVAL_ORBIT_ELEVATIONS, &rig)?,
        Protocol::Random => random_viewpoints(a.n, a.seed, ViewpointRanges::default(), &rig)?,
    };
    let text = serde_json::to_string_pretty(&set)?;
    match &a.out {
        Some(p) => {
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
            write_run_json(cli, &parent_dir(p), "poses", Some(a.seed), json!({ "views": set.len() }))?;
        }
        None => emit(&text)?,
    }
    Ok(())
}

/// Mesh of the scene's exact SDF, colored by the closest primitive.
fn scene_mesh(scene: &SceneSpec, n: usize) -> Result<Mesh> {
    let grid = ExtractionGrid::from_sdf_fn(n, |p| scene.sdf(p))?;
    let mut mesh = extract_mesh(&grid)?;
    let colors = mesh
        .vertices
        .iter()
        .map(|&v| scene.closest(v).map_or([0.5; 3], |(_, i)| scene.primitives[i].albedo))
        .collect();
    mesh.colors = Some(colors);
    Ok(mesh)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let scene = SceneSpec::from_arg(&a.scene)?;
    let poses = match &a.poses {
        Some(p) => read_poses(p)?,
        None => zero123pp_targets(0.0, &CameraRig::default())?,
    };
    let images = render_gt(&scene, &poses.poses);
    write_views_dir(&a.out, &poses, &images)?;
    write_json(&a.out.join("scene.json"), &scene)?;
    if !scene.primitives.is_empty() {
        write_obj(&scene_mesh(&scene, a.gt_grid)?, &a.out.join("gt.obj"))?;
    }
    write_run_json(cli, &a.out, "synth", poses.seed, json!({ "scene": scene, "views": poses.len() }))?;
    eprintln!("wrote {} views to {}", poses.len(), a.out.display());
    Ok(())
}

/// `overlay` merged into `base` key by key.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn fit_config(a: &FitArgs) -> Result<FitConfig> {
    let preset = match a.preset {
        Preset::Base => FitConfig::base(),
        Preset::Large => FitConfig::large(),
        Preset::Desk => FitConfig::desk(),
    };
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let overlay: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let mut v = serde_json::to_value(preset)?;
            merge(&mut v, overlay);
            serde_json::from_value(v).with_context(|| format!("invalid configuration in {}", p.display()))?
        }
        None => preset,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.stage1_steps {
        cfg.stage1.steps = s;
    }
    if let Some(s) = a.stage2_steps {
        cfg.stage2.steps = s;
    }
    cfg.check()?;
    Ok(cfg)
}

fn with_suffix(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    parent_dir(path).join(format!("{stem}{suffix}.{ext}"))
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let cfg = fit_config(a)?;
    let (poses, images) = read_views_dir(&a.scene)?;
    let views = ViewSet::new(poses.poses, images)?;
    let mut field = match &a.init {
        Some(p) => read_checkpoint(p)?,
        None if a.stage == Stage::Two => bail!("--stage 2 needs a stage-1 checkpoint via --init"),
        None => TriplaneField::new(&cfg.triplane, cfg.seed)?,
    };
    let mut trace = Vec::new();
    if a.stage != Stage::Two {
        trace.extend(fit_stage1(&mut field, &views, &cfg, None)?);
    }
    let mesh = if a.stage == Stage::One {
        let handoff = field.with_sdf_from_density(cfg.tau)?;
        shade_vertices(&handoff, &extract_mesh(&build_grid(&handoff, cfg.stage2.grid)?)?)
    } else {
        let (mesh, t2) = fit_stage2(&mut field, &views, &cfg, None)?;
        trace.extend(t2);
        mesh
    };
    write_checkpoint(&field, &a.out)?;
    let mesh_path = a.out.with_extension("obj");
    write_obj(&mesh, &mesh_path)?;
    let trace_path = with_suffix(&a.out, "_trace", "csv");
    write_trace_csv(&trace_path, &trace)?;
    write_run_json(
        cli,
        &parent_dir(&a.out),
        "fit",
        Some(cfg.seed),
        json!({
            "config": cfg,
            "stage": format!("{:?}", a.stage),
            "checkpoint": a.out,
            "mesh": mesh_path,
            "trace": trace_path,
            "triangles": mesh.triangles.len(),
        }),
    )?;
    eprintln!("wrote {} ({} triangles)", mesh_path.display(), mesh.triangles.len());
    Ok(())
}

fn extract(cli: &Cli, a: &ExtractArgs) -> Result<()> {
    let mut field = read_checkpoint(&a.ckpt)?;
    if let Some(tau) = a.from_density {
        field.init_sdf_from_density(tau)?;
    }
    let mesh = extract_mesh(&build_grid(&field, a.grid)?)?;
    if mesh.is_empty() {
        bail!("extraction produced no triangles");
    }
    write_obj(&shade_vertices(&field, &mesh), &a.out)?;
    write_run_json(cli, &parent_dir(&a.out), "extract", None, json!({ "grid": a.grid, "triangles": mesh.triangles.len() }))
}

fn render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let mesh = read_obj(&a.mesh)?;
    mesh.validate()?;
    let poses: PoseSet = read_poses(&a.poses)?;
    let images: Vec<_> = poses.poses.iter().map(|cam| rasterize(&mesh, cam)).collect();
    write_views_dir(&a.out, &poses, &images)?;
    write_run_json(cli, &a.out, "render", poses.seed, json!({ "views": poses.len() }))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let pred = read_obj(&a.pred)?;
    let gt = read_obj(&a.gt)?;
    let geo = evaluate_geometry(&pred, &gt, a.n_points, a.seed, a.tau, a.align)?;
    let (mut p, mut s) = (None, None);
    if let Some(v) = &a.views {
        let poses = read_poses(v)?;
        if poses.is_empty() {
            bail!("{} holds no poses", v.display());
        }
        let (mut ps, mut ss) = (0.0, 0.0);
        for cam in &poses.poses {
            let (x, y) = (rasterize(&pred, cam), rasterize(&gt, cam));
            ps += psnr(&x, &y)?;
            ss += ssim(&x, &y)?;
        }
        p = Some(ps / poses.len() as f64);
        s = Some(ss / poses.len() as f64);
    }
    let report = json!({
        "psnr": p,
        "ssim": s,
        "cd": geo.cd,
        "fscore": geo.fscore,
        "n_points": geo.n_points,
        "seed": geo.seed,
        "aligned_yaw_deg": geo.aligned_yaw_deg,
    });
    emit(&serde_json::to_string_pretty(&report)?)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        write_run_json(cli, &parent_dir(out), "eval", Some(a.seed), report)?;
    }
    Ok(())
}

fn filter(cli: &Cli, a: &FilterArgs) -> Result<()> {
    let entries = read_manifest(&a.manifest)?;
    let result = filter_manifest(&entries);
    write_json(&a.out, &result.kept)?;
    let rejected_path = a.rejected.clone().unwrap_or_else(|| with_suffix(&a.out, "_rejected", "json"));
    write_json(&rejected_path, &result.rejected)?;
    write_run_json(
        cli,
        &parent_dir(&a.out),
        "filter",
        None,
        json!({ "kept": result.kept.len(), "total": entries.len() }),
    )?;
    emit(&format!("kept {} of {}", result.kept.len(), entries.len()))?;
    Ok(())
}
