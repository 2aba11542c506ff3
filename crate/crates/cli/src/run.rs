//! Subcommand bodies. Each writes its outputs and a `.run.json` echo of the
//! effective parameters next to them.

use std::fs;
use std::path::{Path, PathBuf};

use emgleam::attack;
use emgleam::classifier::{self, CnnModel, ModelSpec, TrainConfig};
use emgleam::dataset::{self, Session, SessionConditions, SessionConfig, SplitPlan};
use emgleam::emanator::{self, DisplayTiming, IqRecording, LeakageModel};
use emgleam::pgm::GrayImage;
use emgleam::profile::profile;
use emgleam::raster::{Renderer, Scale, ScreenRaster, DIGITS};
use emgleam::receiver::{self, Emage, ReconParams};
use emgleam::testbed::{self, AttackerModelSpec};
use emgleam::{seed, Error, Exec, Result};
use serde_json::{json, Value};

use crate::{
    Arch, AttackArgs, CropArgs, EmanateArgs, GradcheckArgs, Global, ReconstructArgs, RenderArgs,
    SessionArgs, SnrArgs, SplitArgs, SplitModeArg, TestbedArgs, TrainArgs,
};

fn exec(g: &Global) -> Exec {
    Exec::from_threads(g.threads)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

/// Writes `path` with the command line, global flags and resolved
/// parameters.
fn echo(path: &Path, g: &Global, command: &str, params: Value) -> Result<()> {
    let doc = json!({
        "command": command,
        "argv": std::env::args().skip(1).collect::<Vec<_>>(),
        "seed": g.seed,
        "threads": g.threads,
        "data_dir": g.data_dir,
        "params": params,
    });
    let bytes = serde_json::to_vec_pretty(&doc)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn echo_next_to(out: &Path, g: &Global, command: &str, params: Value) -> Result<()> {
    echo(&with_suffix(out, ".run.json"), g, command, params)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

pub fn render(g: &Global, a: &RenderArgs) -> Result<()> {
    let p = profile(&a.profile)?;
    let renderer = Renderer::with_contrast(a.contrast);
    let screen = p.timing.visible();
    let (raster, content) = if let Some(letter) = a.eyechart {
        let scale = Scale::from_f64(a.scale)?;
        let r = renderer.eyechart(letter, scale, screen)?;
        (r, json!({ "eyechart": letter.to_string(), "scale": scale.value() }))
    } else if a.grid {
        let digits: Vec<char> = match &a.digits {
            Some(d) => d.chars().collect(),
            None => dataset::balanced_digit_plan(a.rows * a.cols, seed::derive(g.seed, "render")),
        };
        let r = renderer
            .digit_grid(a.rows, a.cols, &digits, p.grid_area(a.rows, a.cols))?
            .pad_to(screen, 1.0)?;
        let plan: String = digits.iter().collect();
        (r, json!({ "grid": { "rows": a.rows, "cols": a.cols, "digits": plan } }))
    } else {
        let code = a.code.as_deref().ok_or_else(|| invalid("nothing to render"))?;
        let r = renderer.security_message(code, screen, p.cell)?;
        (r, json!({ "code": code }))
    };
    ensure_parent(&a.output)?;
    raster.write(&a.output)?;
    echo_next_to(
        &a.output,
        g,
        "render",
        json!({ "profile": p.name, "contrast": a.contrast, "content": content, "output": a.output }),
    )
}

pub fn emanate(g: &Global, a: &EmanateArgs) -> Result<()> {
    let mut p = profile(&a.profile)?;
    if let Some(h) = a.harmonic {
        p.leak.harmonic = h;
    }
    let snr_db = match a.snr {
        Some(s) => s.db(),
        None => Some(p.snr_db),
    };
    let conditions = SessionConditions {
        snr_db,
        distance_r: a.distance,
        highpass_alpha: a.highpass_alpha,
        tuning_offset_hz: a.tuning_offset,
        signal_gain: a.signal_gain,
        frames: a.frames,
        sample_rate_hz: a.sample_rate,
    };
    let timing = DisplayTiming {
        f_r: a.f_r.unwrap_or(p.timing.f_r),
        ..p.timing
    };
    let leak_model: LeakageModel = conditions.leak(&p);
    let frontend = conditions.frontend(&p);
    let channel_seed = seed::derive(g.seed, "emanate");
    let channel = conditions.channel(channel_seed);
    let raster = ScreenRaster::read(&a.input)?.pad_to(timing.visible(), 1.0)?;
    let leak = emanator::emanate(&raster, &timing, &leak_model, a.frames).map_err(|e| e.in_stage("emanate"))?;
    let rec = emanator::capture(&leak, &channel, &frontend, exec(g)).map_err(|e| e.in_stage("capture"))?;
    ensure_parent(&a.output)?;
    rec.write(&a.output)?;
    echo_next_to(
        &a.output,
        g,
        "emanate",
        json!({
            "input": a.input,
            "profile": p.name,
            "timing": timing,
            "leak": leak_model,
            "carrier_hz": leak.carrier_hz,
            "conditions": conditions,
            "frontend": frontend,
            "channel_seed": channel_seed,
            "output": a.output,
        }),
    )
}

pub fn reconstruct(g: &Global, a: &ReconstructArgs) -> Result<()> {
    let rec = IqRecording::read(&a.input)?;
    let (mut w, mut h) = (rec.timing.x_t, rec.timing.y_t);
    if let Some(name) = &a.profile {
        let p = profile(name)?;
        (w, h) = (p.emage.width, p.emage.height);
    }
    let w = a.width.unwrap_or(w);
    let h = a.height.unwrap_or(h);
    let hint = a.f_r.unwrap_or(rec.timing.f_r);
    let f_r = if a.estimate_rate {
        let mag = receiver::am_demod(&rec, 1.0)?;
        receiver::estimate_frame_rate(&mag, rec.sample_rate_hz, hint, a.search_ppm).map_err(|e| e.in_stage("sync"))?
    } else {
        hint
    };
    let params = ReconParams {
        gain: a.gain,
        lowpass_cutoff: a.lowpass,
        alignment: a.alignment,
        ..ReconParams::new(w, h, f_r)
    };
    let emage = receiver::reconstruct(&rec, &params, exec(g)).map_err(|e| e.in_stage("reconstruct"))?;
    ensure_parent(&a.output)?;
    emage.write(&a.output)?;
    echo_next_to(
        &a.output,
        g,
        "reconstruct",
        json!({
            "input": a.input,
            "params": params,
            "estimate_rate": a.estimate_rate,
            "search_ppm": a.search_ppm,
            "alignment_offset": emage.alignment_offset,
            "frames_averaged": emage.frames_averaged,
            "output": a.output,
        }),
    )
}

pub fn snr(g: &Global, a: &SnrArgs) -> Result<()> {
    let rec = IqRecording::read(&a.input)?;
    let center = a.center.unwrap_or(rec.center_freq_hz);
    let report = receiver::measure_snr(&rec, center, a.band, a.resolution)?;
    println!("{:.2}", report.snr_db);
    if report.clipped {
        eprintln!("warning: band clipped to the capture bandwidth");
    }
    let params = json!({
        "input": a.input,
        "center_hz": center,
        "band_hz": a.band,
        "resolution_hz": a.resolution,
        "report": report,
        "output": a.output,
    });
    match &a.output {
        Some(out) => {
            ensure_parent(out)?;
            fs::write(out, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(out, e))?;
            echo_next_to(out, g, "snr", params)
        }
        None => echo(&with_suffix(&a.input, ".snr.run.json"), g, "snr", params),
    }
}

pub fn session(g: &Global, a: &SessionArgs) -> Result<()> {
    let root = &g.data_dir;
    let cfg = SessionConfig {
        profile: a.profile.clone(),
        rows: a.rows,
        cols: a.cols,
        screens: a.codes.unwrap_or(a.screens),
        seed: seed::derive(g.seed, &format!("session/{}", a.id)),
        snr_db: a.snr.map(|s| s.db()),
        vary: !a.no_vary,
        frames: a.frames,
        keep_emages: a.keep_emages,
    };
    let s = match a.codes {
        Some(_) => dataset::run_code_session(root, &a.id, &cfg, exec(g))?,
        None => dataset::run_session(root, &a.id, &cfg, None, exec(g))?,
    };
    println!(
        "{}: {} items, mean crop range {:.3}{}",
        s.id,
        s.items.len(),
        s.quality.mean_crop_range,
        if s.quality.flagged { " (flagged)" } else { "" }
    );
    echo(
        &dataset::session_dir(root, &a.id).join("run.json"),
        g,
        "session",
        json!({ "id": a.id, "kind": s.kind, "config": cfg, "conditions": s.conditions }),
    )
}

pub fn crop(g: &Global, a: &CropArgs) -> Result<()> {
    let img = GrayImage::read(&a.input)?;
    if a.w == 0 || a.h == 0 || a.x + a.w > img.width || a.y + a.h > img.height {
        return Err(Error::Dimension(format!(
            "{}x{} crop at ({},{}) leaves the {}x{} image",
            a.w, a.h, a.x, a.y, img.width, img.height
        )));
    }
    let data: Vec<u8> = (a.y..a.y + a.h)
        .flat_map(|r| img.data[r * img.width + a.x..r * img.width + a.x + a.w].iter().copied())
        .collect();
    ensure_parent(&a.output)?;
    GrayImage::new(a.w, a.h, data)?.write(&a.output)?;
    echo_next_to(
        &a.output,
        g,
        "crop",
        json!({ "input": a.input, "x": a.x, "y": a.y, "w": a.w, "h": a.h, "output": a.output }),
    )
}

fn load_sessions(root: &Path, ids: &[String]) -> Result<Vec<Session>> {
    let ids = if ids.is_empty() {
        dataset::list_sessions(root)?
    } else {
        ids.to_vec()
    };
    ids.iter().map(|id| Session::load(root, id)).collect()
}

pub fn split(g: &Global, a: &SplitArgs) -> Result<()> {
    let root = &g.data_dir;
    let sessions = load_sessions(root, &a.sessions)?;
    let split_seed = seed::derive(g.seed, "split");
    let fractions: [f64; 3] = a
        .fractions
        .as_slice()
        .try_into()
        .map_err(|_| invalid(format!("need three fractions, got {:?}", a.fractions)))?;
    let plans = match a.mode {
        SplitModeArg::Fraction => vec![dataset::fraction_plan(&a.name, &sessions, fractions, split_seed)?],
        SplitModeArg::Session => dataset::build_training_sets(&sessions, &a.schedule, a.test_sessions, split_seed)?,
    };
    for plan in &plans {
        plan.write(root)?;
        println!(
            "{}: {} train, {} val, {} test_internal, {} test",
            plan.name,
            plan.train.len(),
            plan.val.len(),
            plan.test_internal.len(),
            plan.test.len()
        );
        echo(
            &SplitPlan::dir(root, &plan.name).join("run.json"),
            g,
            "split",
            json!({
                "name": plan.name,
                "mode": plan.mode,
                "sessions": sessions.iter().map(|s| &s.id).collect::<Vec<_>>(),
                "schedule": a.schedule,
                "test_sessions": a.test_sessions,
                "fractions": fractions,
                "split_seed": split_seed,
            }),
        )?;
    }
    Ok(())
}

/// Digits when every label is a digit, otherwise the sorted label set.
fn classes_of(plan: &SplitPlan) -> Vec<char> {
    let mut labels: Vec<char> = plan
        .train
        .iter()
        .chain(&plan.val)
        .chain(&plan.test)
        .filter_map(|i| i.label.chars().next())
        .collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.iter().all(char::is_ascii_digit) {
        DIGITS.to_vec()
    } else {
        labels
    }
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let root = &g.data_dir;
    let plan = SplitPlan::read(root, &a.split)?;
    let classes = classes_of(&plan);
    let train_set = dataset::load_samples(root, &plan.train, &classes)?;
    let val_set = dataset::load_samples(root, &plan.val, &classes)?;
    let test_set = dataset::load_samples(root, &plan.test, &classes)?;
    let spec = match a.arch {
        Arch::Lenet => ModelSpec::lenet_fit(train_set.h, train_set.w, classes.len()),
        Arch::Widened => ModelSpec::widened(train_set.h, train_set.w, classes.len()),
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: seed::derive(g.seed, "train"),
        ..TrainConfig::default()
    };
    let init_seed = seed::derive(g.seed, "train-init");
    let init = CnnModel::init(spec, init_seed)?;
    let (model, history) = classifier::train(&init, &train_set, &val_set, &cfg, exec(g)).map_err(|e| e.in_stage("train"))?;
    let (test_loss, test_accuracy) = classifier::evaluate(&model, &test_set, exec(g))?;
    println!(
        "best epoch {} val accuracy {:.4}; test accuracy {:.4} on {} items",
        history.best_epoch,
        history.best_val_accuracy,
        test_accuracy,
        test_set.len()
    );
    ensure_parent(&a.output)?;
    model.save(&a.output)?;
    let hist_path = with_suffix(&a.output, ".history.json");
    let doc = json!({
        "history": history,
        "test": { "loss": test_loss, "accuracy": test_accuracy, "items": test_set.len() },
    });
    fs::write(&hist_path, serde_json::to_vec_pretty(&doc)?).map_err(|e| Error::io(&hist_path, e))?;
    echo_next_to(
        &a.output,
        g,
        "train",
        json!({
            "split": a.split,
            "classes": classes.iter().collect::<String>(),
            "spec": spec,
            "config": cfg,
            "init_seed": init_seed,
            "output": a.output,
        }),
    )
}

pub fn gradcheck(g: &Global, a: &GradcheckArgs) -> Result<()> {
    let spec = ModelSpec {
        input_h: a.input_h,
        input_w: a.input_w,
        kernel: a.kernel,
        conv1: a.conv1,
        conv2: a.conv2,
        fc1: a.fc1,
        fc2: a.fc2,
        n_classes: a.classes,
        standardize: true,
    };
    let check_seed = seed::derive(g.seed, "gradcheck");
    let report = classifier::grad_check(spec, check_seed, a.coords)?;
    println!(
        "{} of {} coordinates, max relative error {:.3e}",
        report.coords_checked, report.param_count, report.max_rel_error
    );
    ensure_parent(&a.output)?;
    fs::write(&a.output, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&a.output, e))?;
    echo_next_to(
        &a.output,
        g,
        "gradcheck",
        json!({ "spec": spec, "coords": a.coords, "tolerance": a.tolerance, "check_seed": check_seed }),
    )?;
    if report.max_rel_error >= a.tolerance {
        return Err(invalid(format!(
            "relative error {:.3e} at parameter {} exceeds {:.1e}",
            report.max_rel_error, report.worst_index, a.tolerance
        ))
        .in_stage("gradcheck"));
    }
    Ok(())
}

/// A directory holding `manifest.json` is `<root>/sessions/<id>`; anything
/// else is an id under the data dir.
fn resolve_session(g: &Global, arg: &str) -> Result<(PathBuf, String)> {
    let dir = Path::new(arg);
    if dir.join("manifest.json").is_file() {
        let dir = dir.canonicalize().map_err(|e| Error::io(dir, e))?;
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| invalid(format!("session path {arg:?}")))?;
        let root = dir
            .parent()
            .and_then(Path::parent)
            .ok_or_else(|| invalid(format!("session path {arg:?} is not under <root>/sessions")))?;
        return Ok((root.to_path_buf(), id));
    }
    Ok((g.data_dir.clone(), arg.trim_end_matches('/').to_string()))
}

pub fn attack(g: &Global, a: &AttackArgs) -> Result<()> {
    let model = CnnModel::load(&a.model)?;
    ensure_parent(&a.output)?;
    if let Some(arg) = &a.session {
        let (root, id) = resolve_session(g, arg)?;
        let session = Session::load(&root, &id)?;
        let report = attack::attack_session(&root, &session, &model, exec(g)).map_err(|e| e.in_stage("attack"))?;
        println!(
            "{} codes: per-digit {:.4}, exact {:.4}, >=5 {:.4}, >=4 {:.4}",
            report.items.len(),
            report.per_digit_accuracy,
            report.exact,
            report.at_least_5,
            report.at_least_4
        );
        report.write(&a.output)?;
        return echo_next_to(
            &a.output,
            g,
            "attack",
            json!({ "model": a.model, "root": root, "session": id, "output": a.output }),
        );
    }
    let path = a.emage.as_ref().ok_or_else(|| invalid("no attack target"))?;
    let emage = Emage::read(path)?;
    let (dw, dh) = (model.spec.input_w, model.spec.input_h);
    let map = attack::sliding_map(&emage, &model, dw, dh, exec(g)).map_err(|e| e.in_stage("attack"))?;
    let (row, col) = map.argmax();
    let (x, y) = map.origin(row, col);
    println!("most code-like window at ({x},{y}), score {:.4}", map.at(row, col));
    map.write(&a.output)?;
    echo_next_to(
        &a.output,
        g,
        "attack",
        json!({ "model": a.model, "emage": path, "digit_w": dw, "digit_h": dh, "output": a.output }),
    )
}

pub fn testbed(g: &Global, a: &TestbedArgs) -> Result<()> {
    if a.print_spec {
        let ini = AttackerModelSpec::default().to_ini();
        match &a.output {
            Some(out) => {
                ensure_parent(out)?;
                fs::write(out, ini).map_err(|e| Error::io(out, e))
            }
            None => {
                print!("{ini}");
                Ok(())
            }
        }?;
        return Ok(());
    }
    let path = a.spec.as_ref().ok_or_else(|| invalid("--spec is required"))?;
    let out = a.output.as_ref().ok_or_else(|| invalid("--output is required"))?;
    let spec = AttackerModelSpec::load(path)?;
    let tb_seed = seed::derive(g.seed, "testbed");
    let report = testbed::run_testbed(&spec, tb_seed, exec(g))?;
    println!(
        "accuracy {:.4} on {} items (chance p-value {:.3e})",
        report.accuracy, report.test_items, report.chance_p_value
    );
    for s in &report.per_scale {
        println!("  scale {:>4}: {:.4}", s.scale.value(), s.accuracy);
    }
    ensure_parent(out)?;
    report.write(out)?;
    echo_next_to(
        out,
        g,
        "testbed",
        json!({ "spec_file": path, "spec": spec, "testbed_seed": tb_seed, "output": out }),
    )
}
