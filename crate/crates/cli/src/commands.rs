use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use distvad::arraysim::{render_scene, toy_dataset, SceneSpec};
use distvad::beamform::{
    averaged_beampattern_csv, beampattern_csv, broadband_beampattern, complex_weights, delay_and_sum_weights,
    real_weights, srp_csv, srp_phat, time_avg_beampattern, ArrayGeometry, BeampatternGrid,
};
use distvad::combinator::WeightKind;
use distvad::pipeline::{FrontendKind, Model};
use distvad::segeval::{
    labels_from_segments, metrics_table, parse_rttm, rttm_string, score_labels, score_segments, segments_from_labels,
    write_rttm, LABEL_RATE,
};
use distvad::seqmodel::posteriors_csv;
use distvad::signal::{mask_channels, read_wav, write_wav, MultichannelSignal, SampleEncoding};
use distvad::spectral::stft;
use distvad::trainer::{train as run_training, Dataset, LabelledSegment};
use distvad::Error;
use ndarray::Array2;
use serde_json::json;

use crate::config::{read_json, read_optional, DataSpec, FeaturesConfig, InferRunConfig, SrpRunConfig, TrainRunConfig};
use crate::Common;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn require_out(common: &Common) -> Result<&Path, CliError> {
    common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required for this command".into()))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes to `--out` when given, else to standard output.
fn emit(common: &Common, text: &str) -> Result<(), CliError> {
    match &common.out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn matrix_csv(x: &Array2<f64>) -> String {
    let mut s = String::from("frame");
    for j in 0..x.ncols() {
        s.push_str(&format!(",f{j}"));
    }
    s.push('\n');
    for (t, row) in x.rows().into_iter().enumerate() {
        s.push_str(&t.to_string());
        for v in row {
            s.push_str(&format!(",{v:.9}"));
        }
        s.push('\n');
    }
    s
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "file".into(), |s| s.to_string_lossy().into_owned())
}

fn default_geometry(signal: &MultichannelSignal, radius: f64) -> Result<ArrayGeometry, CliError> {
    Ok(ArrayGeometry::uca(signal.num_channels(), radius)?)
}

pub fn simulate(common: &Common, toy: Option<usize>, float: bool) -> Result<(), CliError> {
    let cfg = common
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("simulate needs --config <scene.json>".into()))?;
    let mut spec: SceneSpec = read_json(cfg)?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let out = require_out(common)?;
    ensure_dir(out)?;
    let enc = if float { SampleEncoding::Float32 } else { SampleEncoding::Pcm16 };
    match toy {
        None => {
            let r = render_scene(&spec)?;
            write_wav(&r.mixture, out.join(format!("{}.wav", spec.file_id)), enc)?;
            write_rttm(&r.truth, out.join(format!("{}.rttm", spec.file_id)))?;
            eprintln!("wrote {} ({} ch, SNR {:.2} dB)", spec.file_id, r.mixture.num_channels(), r.snr_db());
        }
        Some(n) => {
            let ds = toy_dataset(&spec, n, spec.seed)?;
            let width = n.saturating_sub(1).to_string().len().max(3);
            for i in 0..n {
                let mut s = ds.spec(i);
                s.file_id = format!("{}_{i:0width$}", spec.file_id);
                let r = render_scene(&s)?;
                write_wav(&r.mixture, out.join(format!("{}.wav", s.file_id)), enc)?;
                write_rttm(&r.truth, out.join(format!("{}.rttm", s.file_id)))?;
            }
            eprintln!("wrote {n} toy segments");
        }
    }
    Ok(())
}

pub fn features(common: &Common, wav: &Path, variant: Option<FrontendKind>, radius: f64) -> Result<(), CliError> {
    let mut cfg: FeaturesConfig = read_optional(common.config.as_deref())?;
    if let Some(v) = variant {
        cfg.frontend.kind = v;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let signal = read_wav(wav)?;
    if cfg.frontend.kind == FrontendKind::Mvdr && cfg.frontend.geometry.is_none() {
        cfg.frontend.geometry = Some(default_geometry(&signal, radius)?);
    }
    let feats = distvad::pipeline::features_with_init(&cfg.frontend, &signal, cfg.seed)?;
    emit(common, &matrix_csv(&feats))
}

pub struct BeampatternArgs {
    pub checkpoint: Option<PathBuf>,
    pub wav: Option<PathBuf>,
    pub freqs: Vec<f64>,
    pub steer: Option<f64>,
    pub mics: usize,
    pub radius: f64,
    pub grid: usize,
}

pub fn beampattern(common: &Common, a: &BeampatternArgs) -> Result<(), CliError> {
    if a.grid == 0 {
        return Err(CliError::Usage("--grid must be positive".into()));
    }
    let thetas = BeampatternGrid::degree_grid(a.grid);
    match (&a.checkpoint, &a.wav, a.steer) {
        (Some(ckpt), Some(wav), None) => {
            let model = Model::load(ckpt)?;
            let signal = read_wav(wav)?;
            let geom = match &model.cfg.frontend.geometry {
                Some(g) => g.subset(signal.channel_ids())?,
                None => default_geometry(&signal, a.radius)?,
            };
            let ws = model.combination_weights(&signal)?;
            let w = match ws.as_slice() {
                [w] if w.kind == WeightKind::Real => real_weights(w),
                [m, p] => complex_weights(m, p)?,
                _ => return Err(CliError::Data(format!("the {:?} front end has no combination weights", model.cfg.frontend.kind))),
            };
            let mut s = String::from("freq_hz,theta_deg,magnitude,normalized\n");
            for &f in &a.freqs {
                let bp = time_avg_beampattern(&w, &geom, f, &thetas, false)?;
                for line in averaged_beampattern_csv(&bp, &thetas).lines().skip(1) {
                    s.push_str(&format!("{f:.4},{line}\n"));
                }
            }
            emit(common, &s)
        }
        (None, None, Some(deg)) => {
            let geom = ArrayGeometry::uca(a.mics, a.radius)?;
            let grid = BeampatternGrid::new(thetas, a.freqs.clone(), &geom)?;
            let mut values = Vec::new();
            for &f in &a.freqs {
                let w = delay_and_sum_weights(&geom, deg.to_radians(), f);
                values.push(broadband_beampattern(&w, &geom, &BeampatternGrid::new(grid.thetas.clone(), vec![f], &geom)?)?);
            }
            let mut bp = values.remove(0);
            for v in values {
                bp.values.append(ndarray::Axis(0), v.values.view()).expect("same grid");
            }
            emit(common, &beampattern_csv(&bp, &grid))
        }
        _ => Err(CliError::Usage(
            "beampattern needs either --checkpoint and --wav, or --steer".into(),
        )),
    }
}

pub fn srp(common: &Common, wav: &Path, radius: f64) -> Result<(), CliError> {
    let cfg: SrpRunConfig = read_optional(common.config.as_deref())?;
    let signal = read_wav(wav)?;
    let geom = match cfg.geometry {
        Some(g) => g.subset(signal.channel_ids())?,
        None => default_geometry(&signal, radius)?,
    };
    let y = stft(&signal, &Default::default())?;
    let map = srp_phat(&y, &geom, &cfg.srp)?;
    eprintln!("peak at {:.1} deg", map.azimuths[map.argmax].to_degrees());
    emit(common, &srp_csv(&map))
}

fn load_dir(dir: &Path) -> Result<Vec<LabelledSegment>, CliError> {
    let mut wavs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(CliError::Data(format!("no WAV files in {}", dir.display())));
    }
    wavs.iter()
        .map(|w| {
            let signal = read_wav(w)?;
            let refs = parse_rttm(w.with_extension("rttm"))?;
            let labels = labels_from_segments(&refs.for_file(&file_stem(w)), signal.duration_s(), LABEL_RATE);
            Ok(LabelledSegment { signal, labels })
        })
        .collect()
}

fn open_data(spec: &DataSpec) -> Result<Box<dyn Dataset>, CliError> {
    Ok(match spec {
        DataSpec::Toy {
            template,
            n_segments,
            seed,
        } => Box::new(toy_dataset(template, *n_segments, *seed)?),
        DataSpec::Dir(dir) => Box::new(load_dir(dir)?),
    })
}

pub fn train(common: &Common) -> Result<(), CliError> {
    let cfg_path = common
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("train needs --config <train.json>".into()))?;
    let mut cfg: TrainRunConfig = read_json(cfg_path)?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    cfg.train.seed = seed;
    if let Some(ic) = cfg.invariant.as_mut() {
        ic.rng_seed = common.seed.unwrap_or(ic.rng_seed);
    }
    let out = require_out(common)?;
    ensure_dir(out)?;
    let data = open_data(&cfg.data)?;
    let val = cfg.validation.as_ref().map(open_data).transpose()?;
    let model = Model::init(cfg.model.to_model_config(), seed)?;
    let log_path = out.join("train.log");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let outcome = run_training(model, data.as_ref(), val.as_deref(), &cfg.train, cfg.invariant.as_ref(), &mut log)?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    outcome.model.save(out.join("model.ckpt"))?;
    let summary = json!({
        "steps": outcome.steps,
        "best_val_osd_f1": outcome.best_f1,
        "stopped_early": outcome.stopped_early,
        "num_params": outcome.model.params.num_scalars(),
        "seed": seed,
    });
    write_text(&out.join("summary.json"), &format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()))?;
    eprintln!("trained {} steps", outcome.steps);
    Ok(())
}

pub fn infer(common: &Common, checkpoint: &Path, wav: &Path, post_out: Option<&Path>) -> Result<(), CliError> {
    let cfg: InferRunConfig = read_optional(common.config.as_deref())?;
    let model = Model::load(checkpoint)?;
    let signal = read_wav(wav)?;
    let labels = model.infer(&signal, &cfg.sliding)?;
    if let (Some(p), Some(post)) = (post_out, labels.posteriors.as_ref()) {
        write_text(p, &posteriors_csv(post))?;
    }
    emit(common, &rttm_string(&segments_from_labels(&labels, &file_stem(wav))))
}

pub fn score(common: &Common, reference: &Path, hypothesis: &Path, duration: Option<f64>) -> Result<(), CliError> {
    let r = parse_rttm(reference)?;
    let h = parse_rttm(hypothesis)?;
    let report = score_segments(&r, &h, duration, LABEL_RATE)?;
    emit(common, &format!("{}\n", serde_json::to_string_pretty(&report).unwrap()))
}

fn parse_keep(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("bad channel id {t:?} in --keep {s:?}"))))
        .collect()
}

pub fn maskeval(common: &Common, checkpoint: &Path, wav: &Path, rttm: &Path, keep: &[String]) -> Result<(), CliError> {
    let cfg: InferRunConfig = read_optional(common.config.as_deref())?;
    let model = Model::load(checkpoint)?;
    let signal = read_wav(wav)?;
    let refs = parse_rttm(rttm)?;
    let reference = labels_from_segments(&refs.for_file(&file_stem(wav)), signal.duration_s(), cfg.sliding.label_rate);
    let mut sets = vec![signal.channel_ids().to_vec()];
    for k in keep {
        sets.push(parse_keep(k)?);
    }
    let mut rows = Vec::new();
    for set in &sets {
        let masked = mask_channels(&signal, set)?;
        let hyp = model.infer(&masked, &cfg.sliding)?;
        rows.push((format!("C={}", set.len()), score_labels(&reference, &hyp)?));
    }
    emit(common, &metrics_table(&rows))
}
