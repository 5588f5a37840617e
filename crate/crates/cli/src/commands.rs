use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sar_core::checkpoint::AnyModel;
use sar_core::semantics::{config_header, write_profiles_csv};
use sar_core::{
    evaluate, extract_profiles, param_sweep, parse_ratings, predict_mf, project_profiles, split, sweep_csv_header,
    sweep_csv_row, train_mf, train_nmf, train_with_observer, Checkpoint, MFModel, RatingDataset, RatingFormat,
    SarHyperparams, SarModel, Side, Split, SweepParam, TrainConfig,
};

use crate::args::{BaselineArgs, DataArgs, EvalArgs, ModelArgs, PredictArgs, SemanticsArgs, SweepArgs, TrainArgs};
use crate::settings::{read_config_file, Settings};
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn require_file(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{flag}: file not found: {}",
            path.display()
        )))
    }
}

fn apply_data_args(s: &mut Settings, args: &DataArgs) -> Result<(), CliError> {
    if let Some(c) = &args.config {
        require_file("--config", c)?;
        s.merge(&read_config_file(c)?);
    }
    s.set_opt("data", args.data.as_ref().map(|p| p.display().to_string()))
        .set_opt("format", args.format.as_ref())
        .set_opt("rho", args.rho)
        .set_opt("seed", args.seed);
    Ok(())
}

fn apply_model_args(s: &mut Settings, m: &ModelArgs) {
    s.set_opt("features", m.features)
        .set_opt("categories", m.categories)
        .set_opt("rating_max", m.rating_max)
        .set_opt("sigma", m.sigma)
        .set_opt("lambda", m.lambda)
        .set_opt("eta", m.eta)
        .set_opt("epsilon", m.epsilon)
        .set_opt("max_rounds", m.max_rounds)
        .set_opt("batch_size", m.batch_size)
        .set_opt("tolerance", m.tolerance)
        .set_opt("patience", m.patience)
        .set_opt("init_scale", m.init_scale)
        .set_opt("lazy_rows", m.lazy_rows);
}

fn data_defaults(s: &mut Settings) {
    s.default_value("format", RatingFormat::Ml100k)
        .default_value("rho", 0.8)
        .default_value("seed", 0);
}

fn model_defaults(s: &mut Settings) {
    let hp = SarHyperparams::default();
    let tc = TrainConfig::default();
    s.default_value("features", hp.num_features)
        .default_value("categories", hp.num_categories)
        .default_value("sigma", hp.sigma)
        .default_value("lambda", hp.lambda)
        .default_value("eta", tc.eta)
        .default_value("epsilon", tc.epsilon)
        .default_value("max_rounds", tc.max_rounds)
        .default_value("batch_size", tc.batch_size)
        .default_value("tolerance", tc.tolerance)
        .default_value("patience", tc.patience)
        .default_value("init_scale", tc.init_scale)
        .default_value("lazy_rows", tc.lazy_rows);
}

/// Inherits data, format, rho and seed from a checkpoint's echoed settings.
fn inherit_from_checkpoint(s: &mut Settings, ck: &Checkpoint) {
    for key in ["data", "format", "rho", "seed"] {
        if let Some(v) = ck.config().get(key) {
            s.default_value(key, v);
        }
    }
}

fn load_data(s: &Settings) -> Result<RatingDataset, CliError> {
    let path = PathBuf::from(s.get::<String>("data")?);
    require_file("--data", &path)?;
    let format: RatingFormat = s.get("format")?;
    Ok(parse_ratings(&path, format)?)
}

fn load_split(s: &Settings) -> Result<(RatingDataset, Split), CliError> {
    let ds = load_data(s)?;
    let rho: f64 = s.get("rho")?;
    let seed: u64 = s.get("seed")?;
    let sp = split(&ds, rho, seed)?;
    Ok((ds, sp))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require_file("--model", path)?;
    Checkpoint::load(path).map_err(|e| CliError::Validation(format!("--model: {e}")))
}

fn sar_settings(s: &Settings) -> Result<(SarHyperparams, TrainConfig), CliError> {
    let hp = SarHyperparams {
        num_features: s.get("features")?,
        num_categories: s.get("categories")?,
        rating_max: s.get("rating_max")?,
        sigma: s.get("sigma")?,
        lambda: s.get("lambda")?,
    };
    hp.validate()?;
    let tc = TrainConfig {
        eta: s.get("eta")?,
        epsilon: s.get("epsilon")?,
        max_rounds: s.get("max_rounds")?,
        batch_size: s.get("batch_size")?,
        seed: s.get("seed")?,
        tolerance: s.get("tolerance")?,
        patience: s.get("patience")?,
        init_scale: s.get("init_scale")?,
        threads: s.get("threads")?,
        lazy_rows: s.get("lazy_rows")?,
    };
    tc.validate()?;
    Ok((hp, tc))
}

fn base_settings(threads: usize) -> Settings {
    let mut s = Settings::new();
    s.set("threads", threads);
    s
}

pub fn train(args: &TrainArgs, threads: usize) -> Result<(), CliError> {
    let mut s = base_settings(threads);
    apply_data_args(&mut s, &args.data)?;
    apply_model_args(&mut s, &args.model);
    s.set_opt("checkpoint_every", args.checkpoint_every);
    data_defaults(&mut s);
    model_defaults(&mut s);
    let (ds, sp) = load_split(&s)?;
    s.default_value("rating_max", (ds.rating_max() as usize).max(2));
    let (hp, tc) = sar_settings(&s)?;
    let every: usize = if s.contains("checkpoint_every") {
        s.get("checkpoint_every")?
    } else {
        0
    };
    if let Some(prefix) = &args.save_split {
        let p = prefix.display();
        sp.save(format!("{p}.train"), format!("{p}.test"))?;
    }
    let config = s.effective().clone();
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log.csv"));
    let file = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let header = format!("{}round,loss,train_rmse,seconds\n", config_header(&config));
    log.write_all(header.as_bytes()).map_err(|e| io_err(&log_path, e))?;
    let mut side_error: Option<CliError> = None;
    let (params, report) = train_with_observer(&sp.train, &hp, &tc, |st, params| {
        if side_error.is_some() {
            return;
        }
        let row = format!("{},{},{},{}\n", st.round, st.loss, st.train_rmse, st.seconds);
        if let Err(e) = log.write_all(row.as_bytes()).and_then(|_| log.flush()) {
            side_error = Some(io_err(&log_path, e));
            return;
        }
        if every > 0 && st.round % every == 0 {
            let saved = SarModel::new(&sp.train, hp, params.clone())
                .and_then(|m| Checkpoint::from_sar(&m, config.clone()).save(&args.out));
            if let Err(e) = saved {
                side_error = Some(e.into());
            }
        }
    })?;
    if let Some(e) = side_error {
        return Err(e);
    }
    let model = SarModel::new(&sp.train, hp, params)?;
    Checkpoint::from_sar(&model, config).save(&args.out)?;
    println!(
        "trained {} rounds ({:?}), final train RMSE {:.4}; checkpoint {}, log {}",
        report.rounds,
        report.stop_reason,
        report.train_rmse.last().copied().unwrap_or(f64::NAN),
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

fn fallback_of(model: &AnyModel) -> f64 {
    match model {
        AnyModel::Sar(m) => m.global_mean,
        AnyModel::Factor(m) => m.global_mean,
    }
}

pub fn eval(args: &EvalArgs, threads: usize) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.model)?;
    let mut s = base_settings(threads);
    apply_data_args(&mut s, &args.data)?;
    inherit_from_checkpoint(&mut s, &ck);
    data_defaults(&mut s);
    s.set("model", args.model.display());
    let (_, sp) = load_split(&s)?;
    let model = ck.into_model()?;
    let metrics = match &model {
        AnyModel::Sar(m) => evaluate(m, &sp.test, m.global_mean)?,
        AnyModel::Factor(m) => evaluate(m, &sp.test, m.global_mean)?,
    };
    let header = config_header(s.effective());
    print!("{header}");
    println!("{metrics}");
    if let Some(out) = &args.out {
        write_file(out, &format!("{header}{}", metrics.to_csv()))?;
    }
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.model)?.into_model()?;
    let pred = match &model {
        AnyModel::Sar(m) => m.predict_raw(args.user, args.item)?,
        AnyModel::Factor(m) => predict_factor_raw(m, args.user, args.item),
    };
    match pred {
        Some(v) => println!("{v}"),
        None => {
            eprintln!(
                "note: user {} or item {} has no training ratings; printing the training mean",
                args.user, args.item
            );
            println!("{}", fallback_of(&model));
        }
    }
    Ok(())
}

fn predict_factor_raw(m: &MFModel, user: u64, item: u64) -> Option<f64> {
    match (m.users.index_of(user), m.items.index_of(item)) {
        (Some(u), Some(t)) if m.is_warm(u as usize, t as usize) => Some(predict_mf(m, u as usize, t as usize)),
        _ => None,
    }
}

pub fn semantics(args: &SemanticsArgs, threads: usize) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.model)?;
    let kind: Side = args
        .kind
        .parse()
        .map_err(|_| CliError::Validation(format!("--kind: expected user or item, got '{}'", args.kind)))?;
    let mut s = base_settings(threads);
    apply_data_args(&mut s, &args.data)?;
    inherit_from_checkpoint(&mut s, &ck);
    data_defaults(&mut s);
    s.set("model", args.model.display())
        .set("feature", args.feature)
        .set("kind", kind);
    let AnyModel::Sar(model) = ck.into_model()? else {
        return Err(CliError::Validation("--model: semantics needs a sar checkpoint".into()));
    };
    if args.feature >= model.hp.num_features {
        return Err(CliError::Validation(format!(
            "--feature: {} is out of range for {} features",
            args.feature, model.hp.num_features
        )));
    }
    let (_, sp) = load_split(&s)?;
    if sp.train.users().raw_ids() != model.users.raw_ids() || sp.train.items().raw_ids() != model.items.raw_ids() {
        return Err(CliError::Validation(
            "--data: entities differ from the ones the checkpoint was trained on".into(),
        ));
    }
    let (mut profiles, skipped) = extract_profiles(&model.params, &model.hp, &sp.train, args.feature, kind)?;
    if profiles.len() < 2 {
        return Err(CliError::Runtime(format!(
            "only {} profile(s) available; PCA needs at least 2",
            profiles.len()
        )));
    }
    if model.hp.num_categories >= 2 {
        project_profiles(&mut profiles)?;
    }
    write_profiles_csv(&args.out, &profiles, model.hp.num_categories, s.effective())?;
    println!(
        "wrote {} {kind} profiles for feature {} to {} ({} skipped)",
        profiles.len(),
        args.feature,
        args.out.display(),
        skipped.len()
    );
    Ok(())
}

pub fn sweep(args: &SweepArgs, threads: usize) -> Result<(), CliError> {
    let param: SweepParam = args.param.parse().map_err(|_| {
        CliError::Validation(format!(
            "--param: expected rho, F, C, sigma or lambda, got '{}'",
            args.param
        ))
    })?;
    let mut s = base_settings(threads);
    apply_data_args(&mut s, &args.data)?;
    apply_model_args(&mut s, &args.model);
    s.set_opt("seeds", args.seeds.as_ref());
    s.set("param", param).set("values", &args.values);
    data_defaults(&mut s);
    model_defaults(&mut s);
    s.default_value("seeds", "0,1,2");
    let values: Vec<f64> = s.get_list("values")?;
    let seeds: Vec<u64> = s.get_list("seeds")?;
    let ds = load_data(&s)?;
    s.default_value("rating_max", (ds.rating_max() as usize).max(2));
    let (hp, tc) = sar_settings(&s)?;
    let rho: f64 = s.get("rho")?;
    let mut text = format!("{}{}\n", config_header(s.effective()), sweep_csv_header(param));
    param_sweep(&ds, param, &values, &hp, &tc, rho, &seeds, |row| {
        eprintln!(
            "{} = {} seed {}: rmse {:.4}",
            param, row.value, row.seed, row.metrics.rmse
        );
        text.push_str(&sweep_csv_row(row));
        text.push('\n');
    })?;
    match &args.out {
        Some(out) => write_file(out, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn baseline(args: &BaselineArgs, threads: usize) -> Result<(), CliError> {
    let mut s = base_settings(threads);
    apply_data_args(&mut s, &args.data)?;
    s.set_opt("method", args.method.as_ref())
        .set_opt("k", args.k)
        .set_opt("lr", args.lr)
        .set_opt("reg", args.reg)
        .set_opt("epochs", args.epochs);
    data_defaults(&mut s);
    s.default_value("method", "mf")
        .default_value("k", 10)
        .default_value("lr", 0.005)
        .default_value("reg", 0.05)
        .default_value("epochs", 100);
    let method: String = s.get("method")?;
    let k: usize = s.get("k")?;
    let epochs: usize = s.get("epochs")?;
    let seed: u64 = s.get("seed")?;
    let (_, sp) = load_split(&s)?;
    let (model, report) = match method.as_str() {
        "mf" => train_mf(&sp.train, k, s.get("lr")?, s.get("reg")?, epochs, seed)?,
        "nmf" => train_nmf(&sp.train, k, epochs, seed)?,
        other => {
            return Err(CliError::Validation(format!(
                "--method: expected mf or nmf, got '{other}'"
            )));
        }
    };
    let metrics = evaluate(&model, &sp.test, model.global_mean)?;
    let per_epoch = report.seconds.iter().sum::<f64>() / report.seconds.len().max(1) as f64;
    let config: BTreeMap<String, String> = s.effective().clone();
    let header = config_header(&config);
    print!("{header}");
    println!("{metrics}");
    println!("{:<12} {:>10.4}", "sec/epoch", per_epoch);
    if let Some(out) = &args.out {
        Checkpoint::from_mf(&model, config.clone()).save(out)?;
    }
    if let Some(results) = &args.results {
        write_file(
            results,
            &format!("{header}{}seconds_per_epoch,{per_epoch}\n", metrics.to_csv()),
        )?;
    }
    Ok(())
}
