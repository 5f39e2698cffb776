use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use trajcmp_core::archive::{read_archive, write_archive};
use trajcmp_core::dtw::{cross_distances, within_distances, DtwConfig};
use trajcmp_core::error_model::{load_error_samples, ErrorModelFile};
use trajcmp_core::extract::{extract_stop_segments, CfEpisode, LcEpisode, StopSegment};
use trajcmp_core::markov::{build_transition_matrix, read_matrix, score_segments, write_matrix, write_scores};
use trajcmp_core::model::write_trajectories;
use trajcmp_core::pipeline::{
    cf_distance_episodes, distance_section, distance_weights, extract_all, fit_error_model, lc_distance_episodes,
    load_config, load_dataset, permutation_seed, resolve_error, run_pipeline, select, write_headways,
    write_pair_table, write_simex_audit, DatasetConfig, DistanceConfig, DistanceEpisode, PipelineConfig,
    PipelineError,
};
use trajcmp_core::simex::{CF_RULES, LC_RULES};
use trajcmp_core::stats::permutation_test_mean_diff;
use trajcmp_core::synth::{combine, demo_scripts, SceneScript};
use trajcmp_core::{error_model::ErrorModel2D, TrajectoryFormat};

#[derive(Parser)]
#[command(name = "trajcmp", version, about = "Error-aware comparison of vehicle trajectory data sets")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML or JSON); stage commands use its
    /// threshold, error, SIMEX and test blocks.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file, or directory for `run`, `synth` and `simex-pairs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Cf,
    Lc,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Cf => "cf",
            Kind::Lc => "lc",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full comparison: extraction, error model, analyses, tests, report.
    Run,
    /// Generate synthetic scenes (truth and observed copies).
    Synth {
        /// Scene script, or a JSON array of scripts placed side by side.
        script: Option<PathBuf>,
        /// Built-in demo scene set instead of a script file.
        #[arg(long, conflicts_with = "script")]
        demo: bool,
        #[arg(long, default_value_t = 0)]
        variant: u32,
        /// Position noise standard deviations `sx,sy` for the observed copy.
        #[arg(long, value_parser = parse_pair)]
        noise_sigma: Option<[f64; 2]>,
        /// Moving-average window (odd frame count) for the observed copy.
        #[arg(long)]
        smoother: Option<usize>,
        /// Lateral distance between combined scenes.
        #[arg(long, default_value_t = 40.0)]
        spacing: f64,
    },
    /// Car-following episodes.
    ExtractCf {
        input: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Decelerating-to-stop segments from a car-following archive.
    ExtractStop { episodes: PathBuf },
    /// Lane-change episodes.
    ExtractLc {
        input: PathBuf,
        #[arg(long)]
        map: PathBuf,
    },
    /// Queue-discharge headways.
    Headway {
        input: PathBuf,
        #[arg(long)]
        map: PathBuf,
    },
    /// Fit the error model from error samples (`ex,ey[,duration_s]`).
    FitError {
        samples: PathBuf,
        /// Speed error standard deviations `sx,sy` when samples have no
        /// durations.
        #[arg(long, value_parser = parse_pair)]
        speed_sigma: Option<[f64; 2]>,
    },
    /// Transition matrix from a stop-segment archive.
    MarkovBuild { segments: PathBuf },
    /// Score stop segments against a transition matrix.
    MarkovScore {
        #[arg(long)]
        matrix: PathBuf,
        segments: PathBuf,
        /// Error model the segments were measured with; exact if omitted.
        #[arg(long)]
        error_model: Option<PathBuf>,
    },
    /// Raw DTW and DTW* for reference pairs and observed × reference pairs.
    DtwPairs {
        #[arg(long, value_enum)]
        kind: Kind,
        reference: PathBuf,
        observed: Option<PathBuf>,
    },
    /// SIMEX-corrected distance tables and audit trail.
    SimexPairs {
        #[arg(long, value_enum)]
        kind: Kind,
        reference: PathBuf,
        observed: PathBuf,
    },
    /// Permutation test on a pair table written by `simex-pairs`.
    Permtest {
        #[arg(long, value_enum)]
        kind: Kind,
        pairs: PathBuf,
        #[arg(long)]
        permutations: Option<usize>,
    },
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts[..] {
        [a, b] => Ok([a.trim().parse().map_err(|e| format!("{a}: {e}"))?, b.trim().parse().map_err(|e| format!("{b}: {e}"))?]),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

struct Settings {
    cfg: PipelineConfig,
    base: PathBuf,
}

fn settings(g: &Global) -> Result<Settings, PipelineError> {
    let (mut cfg, base) = match &g.config {
        Some(p) => (load_config(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (PipelineConfig::default(), PathBuf::new()),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let cfg = cfg.normalized();
    cfg.validate_stages()?;
    Ok(Settings { cfg, base })
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn open(p: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
}

fn dataset(input: &Path, map: Option<&Path>) -> DatasetConfig {
    DatasetConfig {
        path: input.to_path_buf(),
        format: None,
        map: map.map(Path::to_path_buf),
    }
}

fn write_json(w: &mut dyn Write, v: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// One CSV row per frame: episode id, time and the state channels.
fn write_state_rows(w: &mut dyn Write, header: &[&str], rows: impl Iterator<Item = (String, f64, Vec<f64>)>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header)?;
    for (id, t, values) in rows {
        let mut rec = vec![id, t.to_string()];
        rec.extend(values.iter().map(f64::to_string));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

fn cf_rows(eps: &[CfEpisode]) -> impl Iterator<Item = (String, f64, Vec<f64>)> + '_ {
    eps.iter().flat_map(|e| {
        let id = e.id();
        e.states.iter().enumerate().map(move |(k, s)| (id.clone(), e.start_t + k as f64 * e.dt, s.to_array().to_vec()))
    })
}

fn stop_rows(segs: &[StopSegment]) -> impl Iterator<Item = (String, f64, Vec<f64>)> + '_ {
    segs.iter().flat_map(|e| {
        let id = e.id();
        e.states.iter().enumerate().map(move |(k, s)| (id.clone(), e.start_t + k as f64 * e.dt, s.to_array().to_vec()))
    })
}

fn lc_rows(eps: &[LcEpisode]) -> impl Iterator<Item = (String, f64, Vec<f64>)> + '_ {
    eps.iter().flat_map(|e| {
        let id = e.id();
        e.states.iter().enumerate().map(move |(k, s)| (id.clone(), e.start_t + k as f64 * e.dt, s.to_array().to_vec()))
    })
}

fn distance_episodes(kind: Kind, path: &Path) -> Result<Vec<DistanceEpisode>> {
    Ok(match kind {
        Kind::Cf => cf_distance_episodes(&read_archive::<CfEpisode, _>(open(path)?, "cf")?.1),
        Kind::Lc => lc_distance_episodes(&read_archive::<LcEpisode, _>(open(path)?, "lc")?.1),
    })
}

fn distance_config(s: &Settings, kind: Kind) -> &DistanceConfig {
    match kind {
        Kind::Cf => &s.cfg.cf_dtw,
        Kind::Lc => &s.cfg.lc_dtw,
    }
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum Scripts {
    One(SceneScript),
    Many(Vec<SceneScript>),
}

fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let s = settings(g)?;
    let cfg = &s.cfg;
    let out = g.out.as_deref();
    match cli.command {
        Command::Run => {
            if g.config.is_none() {
                bail!("run needs --config");
            }
            let dir = out.unwrap_or(Path::new("trajcmp-out"));
            let report = run_pipeline(cfg, &s.base, Some(dir))?;
            tracing::info!(tests = report.tests.len(), "report written");
            println!("{}", dir.join("report.json").display());
        }
        Command::Synth {
            script,
            demo,
            variant,
            noise_sigma,
            smoother,
            spacing,
        } => {
            let mut scripts = match (script, demo) {
                (_, true) => demo_scripts(variant),
                (Some(p), false) => match serde_json::from_reader(open(&p)?).with_context(|| format!("parsing {}", p.display()))? {
                    Scripts::One(s) => vec![s],
                    Scripts::Many(v) => v,
                },
                (None, false) => bail!("give a script file or --demo"),
            };
            let noise = noise_sigma.map(|v| ErrorModel2D::new([0.0; 2], v, 0.0, 0)).transpose()?;
            for (k, sc) in scripts.iter_mut().enumerate() {
                if noise.is_some() {
                    sc.noise = noise;
                }
                if smoother.is_some() {
                    sc.smoother = smoother;
                }
                if let Some(seed) = g.seed {
                    sc.seed = seed.wrapping_add(k as u64);
                }
            }
            let scene = combine(&scripts, spacing)?;
            let dir = out.unwrap_or(Path::new("."));
            std::fs::create_dir_all(dir)?;
            let (format, ext) = match g.format {
                Some(Format::Csv) => (TrajectoryFormat::Csv, "csv"),
                _ => (TrajectoryFormat::Jsonl, "jsonl"),
            };
            write_trajectories(&scene.truth, &dir.join(format!("truth.{ext}")), format)?;
            write_trajectories(&scene.observed, &dir.join(format!("observed.{ext}")), format)?;
            if let Some(map) = &scene.truth.map {
                let mut w = sink(Some(&dir.join("map.json")))?;
                write_json(&mut w, map)?;
                w.flush()?;
            }
        }
        Command::ExtractCf { input, map } => {
            let set = load_dataset(&dataset(&input, map.as_deref()), Path::new(""), cfg.dt)?;
            let ex = extract_all(&set, cfg);
            let mut w = sink(out)?;
            match g.format {
                Some(Format::Csv) => write_state_rows(&mut w, &["episode_id", "t", "g", "dv", "vf"], cf_rows(&ex.cf))?,
                _ => write_archive(&mut w, "cf", &cfg.cf, &ex.cf)?,
            }
            w.flush()?;
        }
        Command::ExtractStop { episodes } => {
            let (_, eps): (_, Vec<CfEpisode>) = read_archive(open(&episodes)?, "cf")?;
            let segs = extract_stop_segments(&eps, &cfg.stop);
            let mut w = sink(out)?;
            match g.format {
                Some(Format::Csv) => write_state_rows(&mut w, &["segment_id", "t", "g", "dv", "vf"], stop_rows(&segs))?,
                _ => write_archive(&mut w, "stop", &cfg.stop, &segs)?,
            }
            w.flush()?;
        }
        Command::ExtractLc { input, map } => {
            let set = load_dataset(&dataset(&input, Some(&map)), Path::new(""), cfg.dt)?;
            let ex = extract_all(&set, cfg);
            for (reason, n) in &ex.lc_rejected {
                tracing::info!(%reason, n, "lane changes rejected");
            }
            let mut w = sink(out)?;
            match g.format {
                Some(Format::Csv) => write_state_rows(
                    &mut w,
                    &["episode_id", "t", "dx", "dy", "g_lead", "g_lag", "dv_lead", "dv_lag"],
                    lc_rows(&ex.lc),
                )?,
                _ => write_archive(&mut w, "lc", &cfg.lanes, &ex.lc)?,
            }
            w.flush()?;
        }
        Command::Headway { input, map } => {
            let set = load_dataset(&dataset(&input, Some(&map)), Path::new(""), cfg.dt)?;
            let ex = extract_all(&set, cfg);
            let mut w = sink(out)?;
            match g.format {
                Some(Format::Json) => write_json(&mut w, &ex.headways)?,
                _ => write_headways(&ex.headways, &mut w)?,
            }
            w.flush()?;
        }
        Command::FitError { samples, speed_sigma } => {
            let samples = load_error_samples(&samples)?;
            let file = fit_error_model(&samples, speed_sigma)?;
            let mut w = sink(out)?;
            write_json(&mut w, &file)?;
            w.flush()?;
        }
        Command::MarkovBuild { segments } => {
            let (_, segs): (_, Vec<StopSegment>) = read_archive(open(&segments)?, "stop")?;
            let p = build_transition_matrix(segs.iter().map(|s| s.states.as_slice()), &cfg.markov.bins, cfg.markov.smoothing)?;
            let mut w = sink(out)?;
            write_matrix(&p, &mut w)?;
            w.flush()?;
        }
        Command::MarkovScore {
            matrix,
            segments,
            error_model,
        } => {
            let p = read_matrix(open(&matrix)?)?;
            let (_, segs): (_, Vec<StopSegment>) = read_archive(open(&segments)?, "stop")?;
            let err = match error_model {
                Some(path) => serde_json::from_reader::<_, ErrorModelFile>(open(&path)?)?.derived,
                None => trajcmp_core::error_model::DerivedErrorSet::zero(),
            };
            let scores = score_segments(segs.iter().map(|s| (s.id(), s.states.as_slice())), &p, &err)?;
            let mut w = sink(out)?;
            match g.format {
                Some(Format::Json) => write_json(&mut w, &scores)?,
                _ => write_scores(&scores, &mut w)?,
            }
            w.flush()?;
        }
        Command::DtwPairs {
            kind,
            reference,
            observed,
        } => {
            let dcfg = distance_config(&s, kind);
            let refs = distance_episodes(kind, &reference)?;
            let obs = match &observed {
                Some(p) => distance_episodes(kind, p)?,
                None => Vec::new(),
            };
            let (refs, obs) = (select(&refs, dcfg), select(&obs, dcfg));
            let (weights, notes) = distance_weights(kind.as_str(), refs.iter().chain(&obs).map(|e| &e.series))?;
            for n in notes {
                tracing::warn!("{n}");
            }
            let dtw = DtwConfig {
                weights,
                band: dcfg.band,
                normalize: true,
            };
            let series = |v: &[&DistanceEpisode]| v.iter().map(|e| e.series.clone()).collect::<Vec<_>>();
            let (rs, os) = (series(&refs), series(&obs));
            let mut wr = csv::Writer::from_writer(sink(out)?);
            wr.write_record(["group", "a", "b", "a_id", "b_id", "dtw", "dtw_star", "path_length"])?;
            let cross = cross_distances(&os, &rs, &dtw)?;
            let within = within_distances(&rs, &dtw)?;
            let groups = [("cross", &cross, &obs), ("within", &within, &refs)];
            for (group, pairs, left) in groups {
                for p in pairs.iter() {
                    wr.write_record(&[
                        format!("{}_{group}", kind.as_str()),
                        p.a.to_string(),
                        p.b.to_string(),
                        left[p.a].id.clone(),
                        refs[p.b].id.clone(),
                        p.dtw.to_string(),
                        p.dtw_star.to_string(),
                        p.path_length.to_string(),
                    ])?;
                }
            }
            wr.flush()?;
        }
        Command::SimexPairs {
            kind,
            reference,
            observed,
        } => {
            let err = resolve_error(&cfg.error, &s.base)?;
            let refs = distance_episodes(kind, &reference)?;
            let obs = distance_episodes(kind, &observed)?;
            let rules = match kind {
                Kind::Cf => &CF_RULES[..],
                Kind::Lc => &LC_RULES[..],
            };
            let d = distance_section(kind.as_str(), &refs, &obs, rules, distance_config(&s, kind), &err.generator, &cfg.simex, &cfg.tests)?;
            if let Some(reason) = &d.section.reason {
                tracing::warn!("{}: {reason}", kind.as_str());
            }
            let dir = out.unwrap_or(Path::new("."));
            std::fs::create_dir_all(dir)?;
            let k = kind.as_str();
            write_pair_table(&d, BufWriter::new(File::create(dir.join(format!("{k}_pairs.csv")))?))?;
            let audit: Vec<_> = d.cross.iter().chain(&d.within).cloned().collect();
            write_simex_audit(&audit, BufWriter::new(File::create(dir.join(format!("{k}_simex.jsonl")))?))?;
        }
        Command::Permtest {
            kind,
            pairs,
            permutations,
        } => {
            let mut rd = csv::Reader::from_reader(open(&pairs)?);
            let headers = rd.headers()?.clone();
            let col = |name: &str| headers.iter().position(|h| h == name).with_context(|| format!("pair table has no {name} column"));
            let (gi, di) = (col("group")?, col("d0")?);
            let (mut cross, mut within) = (Vec::new(), Vec::new());
            for rec in rd.records() {
                let rec = rec?;
                let d0: f64 = rec[di].parse().with_context(|| format!("bad d0 {:?}", &rec[di]))?;
                match &rec[gi] {
                    g if g.ends_with("_cross") => cross.push(d0),
                    g if g.ends_with("_within") => within.push(d0),
                    g => bail!("unknown group {g}"),
                }
            }
            let b = permutations.unwrap_or(cfg.tests.permutations);
            let seed = permutation_seed(cfg.simex.seed, kind.as_str());
            let result = permutation_test_mean_diff(&cross, &within, b, seed, cfg.tests.keep_null)?;
            let mut w = sink(out)?;
            write_json(&mut w, &result)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => tracing_subscriber::filter::LevelFilter::WARN,
        1 => tracing_subscriber::filter::LevelFilter::INFO,
        _ => tracing_subscriber::filter::LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", serde_json::json!({ "error": { "stage": "setup", "message": e.to_string() } }));
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (stage, message) = match e.downcast_ref::<PipelineError>() {
                Some(p) => (p.stage, p.message.clone()),
                None => ("cli", format!("{e:#}")),
            };
            eprintln!("{}", serde_json::json!({ "error": { "stage": stage, "message": message } }));
            ExitCode::FAILURE
        }
    }
}
