//! Subcommand bodies. Each `exec_*` reads only the resolved settings map
//! and an output location, so `replay` can re-run any recorded command
//! against a fresh directory and reproduce its artifacts byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use solalt::binning::BinScheme;
use solalt::dataprep::{
    build_corpus, filter_rain, ingest_metadata, Corpus, SceneConfig,
};
use solalt::diffusion::{
    sample, sample_partial, BaseModel, PromptContext, DEFAULT_GUIDANCE, DEFAULT_STEPS,
};
use solalt::encoder::{ContextNet, TokenSet};
use solalt::ephemeris::{label_batch, write_jsonl, GeoSample};
use solalt::img::Image;
use solalt::metrics::eval_sweep;
use solalt::training::{
    select_best_embedding, train_base, train_context_net, train_structure_token,
    write_sweep_csv, OptimConfig, SweepCandidate, MAX_TOKEN_COUNT, SWEEP_LRS,
};
use solalt::{container, seed, Error, Result};

use crate::settings::Settings;

const TAG_SWEEP_SPLIT: u64 = 1;
const TAG_SWEEP_RANK: u64 = 2;
const TAG_COLD_INIT: u64 = 3;

/// Dispatch by command name; `replay` routes recorded runs through here.
pub fn exec(command: &str, s: &Settings, out: &Path) -> Result<()> {
    match command {
        "label" => exec_label(s, out),
        "prep" => exec_prep(s, out),
        "train-base" => exec_train_base(s, out),
        "train-structure" => exec_train_structure(s, out),
        "sweep" => exec_sweep(s, out),
        "train-context" => exec_train_context(s, out),
        "sample" => exec_sample(s, out),
        "eval" => exec_eval(s, out),
        other => Err(Error::domain(format!("unknown command {other:?} in run file"))),
    }
}

/// Where a command's `run.json` lives: inside the output directory, except
/// for `label` whose output is a single file.
pub fn run_json_path(command: &str, out: &Path) -> PathBuf {
    if command == "label" {
        let mut name = out.as_os_str().to_owned();
        name.push(".run.json");
        PathBuf::from(name)
    } else {
        out.join("run.json")
    }
}

fn require_stage(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingStage(format!("{stage} (expected {})", path.display())))
    }
}

/// `fs::read_to_string` with the path folded into the error message.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn optim_config(s: &Settings) -> Result<OptimConfig> {
    Ok(OptimConfig {
        lr: if s.get("lr").is_some() { s.f64("lr")? } else { 0.0 },
        weight_decay: s.f64("weight_decay")?,
        beta1: s.f64("beta1")?,
        beta2: s.f64("beta2")?,
        eps: s.f64("eps")?,
        epochs: s.usize("epochs")?,
        batch_size: s.usize("batch_size")?,
        seed: s.u64("seed")?,
    })
}

fn scene_config(s: &Settings) -> Result<SceneConfig> {
    Ok(SceneConfig {
        width: s.usize("width")?,
        height: s.usize("height")?,
        l_day: s.f64("l_day")?,
        l_night: s.f64("l_night")?,
        k: s.f64("twilight_k")?,
        sigma_min: s.f64("sigma_min")?,
        sigma_max: s.f64("sigma_max")?,
        geometry_seed: s.u64("geometry_seed")?,
    })
}

fn load_base(s: &Settings) -> Result<BaseModel> {
    let path = s.path("base")?;
    require_stage(&path, "train-base")?;
    BaseModel::load(&path)
}

fn load_corpus(s: &Settings) -> Result<Corpus> {
    let dir = s.path("corpus")?;
    require_stage(&dir.join("manifest.csv"), "prep")?;
    Corpus::load(&dir)
}

fn load_structure(s: &Settings) -> Result<TokenSet> {
    let path = s.path("structure")?;
    require_stage(&path, "train-structure")?;
    TokenSet::load(&path)
}

fn load_scheme(s: &Settings) -> Result<BinScheme> {
    let path = s.path("corpus")?.join("bins.json");
    require_stage(&path, "prep")?;
    BinScheme::from_json(&read_text(&path)?)
}

fn exec_label(s: &Settings, out_file: &Path) -> Result<()> {
    let input = s.path("input")?;
    let strict = !s.bool("lenient")?;
    let keep_rain = s.bool("keep_rain")?;
    let text = read_text(&input)?;

    let ingest = ingest_metadata(&text, strict)?;
    for e in &ingest.errors {
        eprintln!("label: skipped record {}: {}", e.index, e.message);
    }
    let parsed = ingest.samples.len();
    let samples = if keep_rain { ingest.samples } else { filter_rain(ingest.samples) };
    let rained_out = parsed - samples.len();

    let outcome = label_batch(samples, strict)?;
    for e in &outcome.errors {
        eprintln!("label: could not label record {}: {}", e.index, e.message);
    }
    let labeled = outcome.labeled;

    let body = match s.get("bins") {
        None => write_jsonl(&labeled),
        Some(spec) => {
            let scheme = label_scheme(s, spec, &labeled)?;
            let mut body = String::new();
            for rec in &labeled {
                let altitude = rec.altitude_deg.expect("label_batch fills altitude_deg");
                let norm = scheme.normalize(altitude)?;
                let mut value = serde_json::to_value(rec)
                    .map_err(|e| Error::contract(e.to_string()))?;
                let obj = value.as_object_mut().expect("records serialize to objects");
                obj.insert("normalized".into(), serde_json::json!(norm.value));
                obj.insert("bin".into(), serde_json::json!(norm.bin_index));
                body.push_str(&value.to_string());
                body.push('\n');
            }
            body
        }
    };

    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out_file, body)?;
    eprintln!(
        "label: {} records in, {} dropped as rain, {} labeled out",
        parsed,
        rained_out,
        labeled.len()
    );
    Ok(())
}

/// Resolve the bin spec for `label`: explicit `--a-min`/`--a-max` flags win;
/// otherwise the `a_min`/`a_max` keywords fall back to the data extremes.
fn label_scheme(s: &Settings, spec: &str, labeled: &[GeoSample]) -> Result<BinScheme> {
    let altitudes: Vec<f64> = labeled.iter().filter_map(|r| r.altitude_deg).collect();
    let data_min = altitudes.iter().copied().reduce(f64::min);
    let data_max = altitudes.iter().copied().reduce(f64::max);
    let a_min = match s.get("a_min") {
        Some(_) => Some(s.f64("a_min")?),
        None => data_min,
    };
    let a_max = match s.get("a_max") {
        Some(_) => Some(s.f64("a_max")?),
        None => data_max,
    };
    BinScheme::parse_spec(spec, a_min, a_max)
}

fn exec_prep(s: &Settings, out: &Path) -> Result<()> {
    let scheme = BinScheme::parse_spec(s.str("bins")?, None, None)?;
    let cfg = scene_config(s)?;
    let per_bin = s.usize("per_bin")?;
    let corpus = build_corpus(&scheme, per_bin, &cfg, s.u64("seed")?)?;
    fs::create_dir_all(out)?;
    corpus.save(out)?;
    let scene_json =
        serde_json::to_string_pretty(&cfg).map_err(|e| Error::contract(e.to_string()))?;
    fs::write(out.join("scene.json"), scene_json + "\n")?;
    eprintln!(
        "prep: wrote {} scenes ({} per bin over {} bins) to {}",
        corpus.len(),
        per_bin,
        scheme.bin_count(),
        out.display()
    );
    Ok(())
}

fn exec_train_base(s: &Settings, out: &Path) -> Result<()> {
    let corpus = load_corpus(s)?;
    let cfg = optim_config(s)?;
    let (model, report) = train_base(&corpus, &cfg)?;
    fs::create_dir_all(out)?;
    model.save(&out.join("base_model.bin"))?;
    report.save(&out.join("train_report.json"))?;
    eprintln!(
        "train-base: eval loss {:.4} -> {:.4} over {} epochs ({:.1}s)",
        report.initial_loss, report.final_loss, cfg.epochs, report.wall_time_s
    );
    Ok(())
}

fn exec_train_structure(s: &Settings, out: &Path) -> Result<()> {
    let model = load_base(s)?;
    let corpus = load_corpus(s)?;
    let cfg = optim_config(s)?;
    let token_count = s.usize("token_count")?;
    let fraction = s.f64("fraction")?;

    let day = corpus.daytime_indices();
    let excluded = corpus.len() - day.len();
    let subset_idx = corpus.structure_subset(fraction, cfg.seed)?;
    let images: Vec<Image> =
        subset_idx.iter().map(|&i| corpus.items[i].image.clone()).collect();
    eprintln!(
        "train-structure: excluded {} night images; training {} tokens on {} of {} daytime scenes",
        excluded,
        token_count,
        images.len(),
        day.len()
    );

    let (tokens, report) = train_structure_token(&model, &images, &cfg, token_count)?;
    fs::create_dir_all(out)?;
    tokens.save(&out.join("structure_tokens.bin"))?;
    report.save(&out.join("train_report.json"))?;
    eprintln!(
        "train-structure: eval loss {:.4} -> {:.4} ({:.1}s)",
        report.initial_loss, report.final_loss, report.wall_time_s
    );
    Ok(())
}

fn exec_sweep(s: &Settings, out: &Path) -> Result<()> {
    let model = load_base(s)?;
    let corpus = load_corpus(s)?;
    let cfg = optim_config(s)?;
    let heldout_fraction = s.f64("heldout_fraction")?;
    let rank_samples = s.usize("rank_samples")?;
    if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
        return Err(Error::domain(format!(
            "heldout fraction must lie in (0, 1), got {heldout_fraction}"
        )));
    }
    if rank_samples < 2 {
        return Err(Error::domain("rank_samples must be at least 2"));
    }

    let train_idx =
        corpus.structure_subset(1.0 - heldout_fraction, seed::derive(cfg.seed, TAG_SWEEP_SPLIT))?;
    let heldout: Vec<Image> = corpus
        .daytime_indices()
        .into_iter()
        .filter(|i| train_idx.binary_search(i).is_err())
        .map(|i| corpus.items[i].image.clone())
        .collect();
    if heldout.len() < 2 {
        return Err(Error::domain(
            "heldout split has fewer than 2 images; raise --heldout-fraction or grow the corpus",
        ));
    }
    let train_images: Vec<Image> =
        train_idx.iter().map(|&i| corpus.items[i].image.clone()).collect();

    let mut candidates = Vec::with_capacity(SWEEP_LRS.len() * MAX_TOKEN_COUNT);
    for &lr in &SWEEP_LRS {
        for token_count in 1..=MAX_TOKEN_COUNT {
            let cell = cfg.clone().with_lr(lr);
            let (tokens, report) = train_structure_token(&model, &train_images, &cell, token_count)?;
            eprintln!(
                "sweep: lr {lr} tokens {token_count}: eval loss {:.4} -> {:.4}",
                report.initial_loss, report.final_loss
            );
            candidates.push(SweepCandidate {
                tokens,
                lr,
                token_count,
                final_loss: report.final_loss,
            });
        }
    }

    let steps = DEFAULT_STEPS.min(model.schedule.len());
    let rank_seed = seed::derive(cfg.seed, TAG_SWEEP_RANK);
    let outcome = select_best_embedding(&candidates, &heldout, |i, cand| {
        let ctx = model.table.context_from_tokens(&cand.tokens)?;
        (0..rank_samples)
            .map(|j| {
                sample(
                    &model.denoiser,
                    &model.params,
                    &model.schedule,
                    &ctx,
                    steps,
                    DEFAULT_GUIDANCE,
                    seed::derive(rank_seed, (i * rank_samples + j) as u64),
                )
            })
            .collect()
    })?;

    fs::create_dir_all(out)?;
    write_sweep_csv(&out.join("sweep.csv"), &outcome.rows)?;
    let winner = &candidates[outcome.winner];
    winner.tokens.save(&out.join("structure_tokens.bin"))?;
    let winner_json = serde_json::to_string_pretty(&outcome.rows[outcome.winner])
        .map_err(|e| Error::contract(e.to_string()))?;
    fs::write(out.join("winner.json"), winner_json + "\n")?;
    eprintln!(
        "sweep: winner lr {} with {} tokens (proxy {:.4}) over {} candidates",
        winner.lr,
        winner.token_count,
        outcome.rows[outcome.winner].proxy_fid,
        candidates.len()
    );
    Ok(())
}

fn exec_train_context(s: &Settings, out: &Path) -> Result<()> {
    let model = load_base(s)?;
    let corpus = load_corpus(s)?;
    let tokens = load_structure(s)?;
    let cfg = optim_config(s)?;
    let rbf_centers = s.usize("rbf_centers")?;
    let token_count = match s.get("token_count") {
        Some(_) => s.usize("token_count")?,
        None => tokens.m,
    };

    let d = model.denoiser.cond_dim;
    let net = ContextNet::new(rbf_centers, token_count, d)?;
    let init = if token_count == tokens.m && d == tokens.d {
        net.init_params_from(&tokens)?
    } else {
        eprintln!(
            "train-context: {}x{} tokens requested but structure set is {}x{}; starting cold",
            token_count, d, tokens.m, tokens.d
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, TAG_COLD_INIT));
        net.init_params(&mut rng)
    };

    let (params, report) = train_context_net(&model, &corpus, &net, init, &cfg)?;
    fs::create_dir_all(out)?;
    net.save(&params, &out.join("context_net.bin"))?;
    report.save(&out.join("train_report.json"))?;
    eprintln!(
        "train-context: eval loss {:.4} -> {:.4} over {} epochs ({:.1}s)",
        report.initial_loss, report.final_loss, cfg.epochs, report.wall_time_s
    );
    Ok(())
}

/// Parse `--altitude`: plain degrees, or `norm:<x>` for an already
/// normalized value in [0, 1].
fn normalized_altitude(spec: &str, scheme: &BinScheme) -> Result<f64> {
    if let Some(rest) = spec.strip_prefix("norm:") {
        let v: f64 = rest
            .parse()
            .map_err(|_| Error::domain(format!("bad normalized altitude {rest:?}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(format!(
                "normalized altitude must lie in [0, 1], got {v}"
            )));
        }
        Ok(v)
    } else {
        let deg: f64 = spec.parse().map_err(|_| {
            Error::domain(format!(
                "altitude {spec:?} is neither a degree value nor norm:<x>"
            ))
        })?;
        Ok(scheme.normalize(deg)?.value)
    }
}

fn exec_sample(s: &Settings, out: &Path) -> Result<()> {
    let model = load_base(s)?;
    let structure = load_structure(s)?;
    let context_path = s.path("context")?;
    require_stage(&context_path, "train-context")?;
    let (net, net_params) = ContextNet::load(&context_path)?;
    let scheme = load_scheme(s)?;

    let v = normalized_altitude(s.str("altitude")?, &scheme)?;
    let count = s.usize("count")?;
    let steps = s.usize("steps")?;
    let switch_step = s.usize("switch_step")?;
    let guidance = s.f64("guidance")?;
    let seed_value = s.u64("seed")?;

    let dynamic = TokenSet::new("D*", net.m, net.d, net.forward(&net_params, v)?)?;
    let ctx_first = model.table.context_from_tokens(&dynamic)?;
    let mut second_rows = dynamic.embeddings.clone();
    second_rows.extend_from_slice(&structure.embeddings);
    let ctx_second = PromptContext::new(model.table.d, second_rows, model.table.null().to_vec())?;

    fs::create_dir_all(out)?;
    for i in 0..count {
        let img = sample_partial(
            &model.denoiser,
            &model.params,
            &model.schedule,
            &ctx_first,
            &ctx_second,
            steps,
            switch_step,
            guidance,
            seed::derive(seed_value, i as u64),
        )?;
        container::write_pgm(&out.join(format!("sample_{i:03}.pgm")), &img)?;
    }
    eprintln!(
        "sample: wrote {} images at normalized altitude {:.4} to {}",
        count,
        v,
        out.display()
    );
    Ok(())
}

fn exec_eval(s: &Settings, out: &Path) -> Result<()> {
    let model = load_base(s)?;
    let structure = load_structure(s)?;
    let context_path = s.path("context")?;
    require_stage(&context_path, "train-context")?;
    let (net, net_params) = ContextNet::load(&context_path)?;
    let scheme = load_scheme(s)?;
    let scene_path = s.path("corpus")?.join("scene.json");
    require_stage(&scene_path, "prep")?;
    let scene_cfg: SceneConfig = serde_json::from_str(&read_text(&scene_path)?)
        .map_err(|e| Error::domain(format!("scene config {}: {e}", scene_path.display())))?;

    let altitudes: Vec<f64> = s
        .str("altitudes")?
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>()
                .map_err(|_| Error::domain(format!("bad normalized altitude {tok:?}")))
        })
        .collect::<Result<_>>()?;
    let n_per_condition = s.usize("n_per_condition")?;
    let seed_value = s.u64("seed")?;

    let output = eval_sweep(
        &model,
        &net,
        &net_params,
        &structure,
        &scheme,
        &scene_cfg,
        &altitudes,
        n_per_condition,
        seed_value,
    )?;

    fs::create_dir_all(out)?;
    output.report.save(&out.join("eval_report.json"))?;
    let table = output.report.text_table();
    fs::write(out.join("eval_table.txt"), &table)?;
    let cols = (n_per_condition as f64).sqrt().ceil() as usize;
    for (i, images) in output.generated.iter().enumerate() {
        container::write_png_grid(&out.join(format!("contact_{i}.png")), images, cols)?;
    }
    print!("{table}");
    eprintln!(
        "eval: {} conditions x {} samples written to {}",
        altitudes.len(),
        n_per_condition,
        out.display()
    );
    Ok(())
}
