use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use exloop_core::augment::{augment_manifest, AugmentConfig};
use exloop_core::dataset::{
    balanced_subset, class_counts, load_samples, stratified_split, DatasetManifest, ImageStore, SampleRecord,
    SampleSource, SplitConfig,
};
use exloop_core::eval::{cross_evaluate, evaluate, render_report, EvalReport};
use exloop_core::game::{new_session, GameMode, ManifestSink, NewSession, SpawnConfig, VerificationMatcher};
use exloop_core::nn::{build_initial_cnn, read_weights, train, write_weights, Model, TrainConfig};
use exloop_core::orchestrator::{proportion_variance, run_loop, EvalSets, LoopConfig};
use exloop_core::simplayer::{make_population, play_session, render_corpus, PopulationMode, SyntheticPlayer};
use exloop_core::verify::ThresholdTable;
use exloop_core::{ExpressionLabel, Image, NUM_CLASSES};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "exloop", version, about = "Expression game harvesting and recursive fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write 30 filtered/transformed variants of every image in a manifest.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file overriding the filter bank and transforms.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Downsample every class to the smallest class count.
    Subset {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        balanced: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<input>.balanced.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified train/test split written beside the input.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        train_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Class counts of a manifest.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Confusion matrix and averages of a model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// A dataset the model was not trained on; written to `<out>-cross.csv`.
        #[arg(long)]
        cross: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulated players play general-mode sessions; matched frames are harvested.
    Simulate {
        #[arg(long)]
        players: usize,
        #[arg(long, value_enum, default_value = "subtle")]
        mode: Mode,
        /// Sessions per player.
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        harvest_out: PathBuf,
        /// Engine weights; an untrained network when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        skill: f64,
        #[arg(long, default_value_t = 100)]
        max_frames: usize,
    },
    /// Recursive harvest and fine-tune loop driven by a JSON config.
    Loop {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a seed engine on a rendered exaggerated corpus.
    TrainSeed {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        players: usize,
        #[arg(long, default_value_t = 70)]
        per_class: usize,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the rendered train/test corpora here as manifests.
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
    },
    /// HTTP API; settings come from EXLOOP_* variables, flags override them.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Exaggerated,
    Subtle,
}

impl From<Mode> for PopulationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Exaggerated => PopulationMode::Exaggerated,
            Mode::Subtle => PopulationMode::Subtle,
        }
    }
}

/// A rendered population.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PopulationSpec {
    players: usize,
    mode: PopulationMode,
    seed: u64,
    /// Overrides the per-player appearance offset of the mode.
    #[serde(default)]
    offset_std: Option<f64>,
}

impl PopulationSpec {
    fn build(&self) -> Result<Vec<SyntheticPlayer>> {
        let mut players = make_population(self.players, self.mode, self.seed)?;
        if let Some(s) = self.offset_std {
            let mut look = self.mode.render_params();
            look.offset_std = s;
            look.validate()?;
            players.iter_mut().for_each(|p| p.render = look.clone());
        }
        Ok(players)
    }
}

/// `loop --config` file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoopFile {
    seed_model: PathBuf,
    /// Population the seed model was trained on; its renders form the self test.
    seed_population: PopulationSpec,
    /// Population being served.
    population: PopulationSpec,
    #[serde(default = "default_test_per_class")]
    test_per_class: usize,
    #[serde(default)]
    test_seed: u64,
    #[serde(rename = "loop")]
    loop_config: LoopConfig,
}

fn default_test_per_class() -> usize {
    50
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match Cli::parse().command {
        Command::Augment { input, out, config } => cmd_augment(&input, &out, config.as_deref()),
        Command::Subset { input, balanced, seed, out } => cmd_subset(&input, balanced, seed, out),
        Command::Split { input, train_frac, seed } => cmd_split(&input, train_frac, seed),
        Command::Stats { input, json } => cmd_stats(&input, json),
        Command::Eval { model, dataset, cross, out } => cmd_eval(&model, &dataset, cross.as_deref(), &out),
        Command::Simulate { players, mode, rounds, seed, harvest_out, model, thresholds, skill, max_frames } => {
            let sim = Simulation { players, mode: mode.into(), rounds, seed, skill, max_frames };
            cmd_simulate(&sim, &harvest_out, model.as_deref(), thresholds.as_deref())
        }
        Command::Loop { config, out } => cmd_loop(&config, &out),
        Command::TrainSeed { out, players, per_class, epochs, lr, seed, corpus_dir } => {
            cmd_train_seed(&out, players, per_class, TrainConfig { epochs, learning_rate: lr, seed, ..TrainConfig::default() }, corpus_dir.as_deref())
        }
        Command::Serve { port, data_dir, model } => cmd_serve(port, data_dir, model),
    }
}

/// Image paths in a manifest are relative to the manifest's directory.
fn root_of(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_model(path: &Path) -> Result<Model> {
    let (spec, weights) = read_weights(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Model::new(spec, weights)?)
}

fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<(Image, ExpressionLabel)>)> {
    let m = DatasetManifest::load(path).with_context(|| format!("reading {}", path.display()))?;
    let samples = load_samples(&m, &root_of(path))?;
    Ok((m, samples))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

fn cmd_augment(input: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => AugmentConfig::default(),
    };
    let m = DatasetManifest::load(input)?;
    let aug = augment_manifest(&m, &root_of(input), out, &cfg)?;
    let path = out.join("manifest.json");
    aug.save(&path)?;
    println!("{} images -> {} variants, manifest {}", m.len(), aug.len(), path.display());
    Ok(())
}

fn cmd_subset(input: &Path, balanced: bool, seed: u64, out: Option<PathBuf>) -> Result<()> {
    if !balanced {
        bail!("only --balanced subsets are supported");
    }
    let m = DatasetManifest::load(input)?;
    let sub = balanced_subset(&m, seed)?;
    let path = out.unwrap_or_else(|| sibling(input, "balanced"));
    if root_of(&path).canonicalize().ok() != root_of(input).canonicalize().ok() {
        bail!("the subset must be written beside its input so image paths stay valid");
    }
    sub.save(&path)?;
    println!("{} -> {} ({} per class), {}", m.len(), sub.len(), sub.len() / NUM_CLASSES, path.display());
    Ok(())
}

fn cmd_split(input: &Path, train_fraction: f64, seed: u64) -> Result<()> {
    let m = DatasetManifest::load(input)?;
    let (train, test) = stratified_split(&m, &SplitConfig { train_fraction, seed })?;
    let (tp, sp) = (sibling(input, "train"), sibling(input, "test"));
    train.save(&tp)?;
    test.save(&sp)?;
    println!("train {} -> {}\ntest {} -> {}", train.len(), tp.display(), test.len(), sp.display());
    Ok(())
}

#[derive(Serialize)]
struct Stats<'a> {
    id: &'a str,
    total: usize,
    counts: [usize; NUM_CLASSES],
    proportion_variance: f64,
}

fn cmd_stats(input: &Path, json: bool) -> Result<()> {
    let m = DatasetManifest::load(input)?;
    let counts = class_counts(&m);
    let stats = Stats { id: m.id(), total: m.len(), counts, proportion_variance: proportion_variance(&counts) };
    if json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
        return Ok(());
    }
    println!("{} ({} images)", stats.id, stats.total);
    for label in ExpressionLabel::ALL {
        let n = counts[label.index()];
        let share = if stats.total == 0 { 0.0 } else { n as f64 / stats.total as f64 };
        println!("{:<9}{n:>8}  {:>5.1}%", label.name(), share * 100.0);
    }
    Ok(())
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let r = render_report(report);
    std::fs::write(path, r.csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", r.text);
    Ok(())
}

fn cmd_eval(model: &Path, dataset: &Path, cross: Option<&Path>, out: &Path) -> Result<()> {
    let model = load_model(model)?;
    let (m, samples) = load_dataset(dataset)?;
    write_report(&evaluate(&model, m.id(), &samples)?, out)?;
    if let Some(cross) = cross {
        let (m, samples) = load_dataset(cross)?;
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        write_report(&cross_evaluate(&model, m.id(), &samples)?, &out.with_file_name(format!("{stem}-cross.csv")))?;
    }
    Ok(())
}

struct Simulation {
    players: usize,
    mode: PopulationMode,
    rounds: usize,
    seed: u64,
    skill: f64,
    max_frames: usize,
}

fn cmd_simulate(sim: &Simulation, harvest_out: &Path, model: Option<&Path>, thresholds: Option<&Path>) -> Result<()> {
    let model = match model {
        Some(p) => load_model(p)?,
        None => {
            let (spec, weights) = build_initial_cnn(sim.seed);
            Model::new(spec, weights)?
        }
    };
    let thresholds = thresholds.map(ThresholdTable::load).transpose()?.unwrap_or_default();
    let matcher = VerificationMatcher { model: &model, thresholds: &thresholds };
    let population = make_population(sim.players, sim.mode, sim.seed)?;
    let id = harvest_out.file_stem().and_then(|s| s.to_str()).unwrap_or("harvest").to_string();
    let mut manifest = DatasetManifest::new(id);
    let store = ImageStore::new(root_of(harvest_out));
    let (mut frames, mut matched) = (0, 0);
    for (j, player) in population.into_iter().enumerate() {
        let player = player.with_skill(sim.skill)?;
        for r in 0..sim.rounds {
            let slot = j * sim.rounds + r;
            let mut session = new_session(NewSession {
                id: format!("{}-r{r}", player.id),
                mode: GameMode::General,
                user_id: Some(player.id.clone()),
                templates: None,
                spawn: SpawnConfig::default(),
                seed: sim.seed ^ ((j as u64) << 20) ^ r as u64,
                now: slot as f64 * (sim.max_frames as f64 + 10.0),
            })?;
            let mut sink = ManifestSink { manifest: &mut manifest, store: &store };
            let trace = play_session(&player, &mut session, &matcher, &mut sink, sim.max_frames)?;
            frames += trace.len();
            matched += trace.iter().filter(|e| e.result.matched).count();
        }
    }
    manifest.save(harvest_out)?;
    let counts = class_counts(&manifest);
    println!("{frames} frames, {matched} matched, {} harvested {:?} -> {}", manifest.len(), counts, harvest_out.display());
    Ok(())
}

fn cmd_loop(config: &Path, out: &Path) -> Result<()> {
    let file: LoopFile = serde_json::from_str(&std::fs::read_to_string(config)?)
        .with_context(|| format!("parsing {}", config.display()))?;
    let seed_model = load_model(&root_of(config).join(&file.seed_model))?;
    let self_test = render_corpus(&file.seed_population.build()?, file.test_per_class, file.test_seed);
    let population = file.population.build()?;
    let target_test = render_corpus(&population, file.test_per_class, file.test_seed.wrapping_add(1));
    let sets = EvalSets { self_id: "self", self_test: &self_test, target_id: "target", target_test: &target_test };
    let output = run_loop(&seed_model, &population, &sets, &file.loop_config)?;

    std::fs::create_dir_all(out)?;
    for ((it, model), frames) in output.report.iterations.iter().zip(&output.models).zip(&output.harvests) {
        let dir = out.join(format!("iteration-{}", it.iteration));
        std::fs::create_dir_all(&dir)?;
        let store = ImageStore::new(&dir);
        let mut records = Vec::with_capacity(frames.len());
        for f in frames {
            let path = store.put(&f.image)?;
            if records.iter().any(|r: &SampleRecord| r.path == path) {
                continue;
            }
            records.push(SampleRecord {
                path,
                label: f.label,
                source: SampleSource::Harvest,
                user_id: Some(f.user_id.clone()),
                confidence: Some(f.confidence),
                ts: f.ts.floor() as i64,
            });
        }
        DatasetManifest::from_records(format!("harvest-{}", it.iteration), records)?.save(&dir.join("harvest.json"))?;
        write_weights(&dir.join("model.expw"), &model.spec, &model.weights)?;
        let reports = [
            ("self-before", Some(&it.self_before)),
            ("target-before", Some(&it.target_before)),
            ("self-after", it.self_after.as_ref()),
            ("target-after", it.target_after.as_ref()),
        ];
        for (name, report) in reports {
            if let Some(r) = report {
                std::fs::write(dir.join(format!("{name}.csv")), render_report(r).csv)?;
            }
        }
        let after = |r: Option<&EvalReport>| r.map(|r| format!("{:.3}", r.micro)).unwrap_or_else(|| "skipped".into());
        println!(
            "iteration {}: harvested {:?}, target {:.3} -> {}, self {:.3} -> {}, balance {:.5}",
            it.iteration,
            it.harvest_counts,
            it.target_before.micro,
            after(it.target_after.as_ref()),
            it.self_before.micro,
            after(it.self_after.as_ref()),
            proportion_variance(&it.cumulative_counts),
        );
    }
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&output.report)?)?;
    Ok(())
}

fn cmd_train_seed(out: &Path, players: usize, per_class: usize, cfg: TrainConfig, corpus_dir: Option<&Path>) -> Result<()> {
    let look = PopulationSpec { players, mode: PopulationMode::Exaggerated, seed: cfg.seed, offset_std: Some(0.0) };
    let population = look.build()?;
    let train_set = render_corpus(&population, per_class, cfg.seed);
    let test_set = render_corpus(&population, (per_class * 3 / 7).max(1), cfg.seed.wrapping_add(1));
    let (spec, weights) = build_initial_cnn(cfg.seed);
    let outcome = train(&spec, &weights, &train_set, &cfg)?;
    let model = Model::new(spec, outcome.weights)?;
    write_weights(out, &model.spec, &model.weights)?;
    let self_eval = evaluate(&model, "seed-test", &test_set)?;
    println!(
        "trained {} on {} images, final loss {:.4}, held-out micro {:.3} -> {}",
        model.id,
        train_set.len(),
        outcome.loss_history.last().copied().unwrap_or(f64::NAN),
        self_eval.micro,
        out.display()
    );
    if let Some(dir) = corpus_dir {
        for (name, set) in [("seed-train", &train_set), ("seed-test", &test_set)] {
            let store = ImageStore::new(dir);
            let mut records: Vec<SampleRecord> = Vec::with_capacity(set.len());
            for (image, label) in set.iter() {
                let path = store.put(image)?;
                if !records.iter().any(|r| r.path == path) {
                    records.push(SampleRecord { path, label: *label, source: SampleSource::Seed, user_id: None, confidence: None, ts: 0 });
                }
            }
            DatasetManifest::from_records(name, records)?.save(&dir.join(format!("{name}.json")))?;
        }
    }
    Ok(())
}

fn cmd_serve(port: Option<u16>, data_dir: Option<PathBuf>, model: Option<PathBuf>) -> Result<()> {
    let mut cfg = exloop_service::ServiceConfig::from_env().map_err(anyhow::Error::msg)?;
    if let Some(p) = port {
        cfg.port = p;
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    if model.is_some() {
        cfg.model_path = model;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(exloop_service::serve(cfg))?;
    Ok(())
}
