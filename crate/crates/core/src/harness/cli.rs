//! `gencurve` command-line front end.

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::curve::{curve_distances, CurveEngine, CurveMethod, CurveOptions, Direction, PixelSet};
use crate::error::{Error, Result};
use crate::geometry::{default_k, stretch_stats, StretchOptions};
use crate::harness::config::Config;
use crate::harness::datasets::{gen_blob_dataset, gen_points_dataset, BlobSample, PointsKind, IMAGE_SIDE};
use crate::harness::experiments::{agreement_experiment, saliency_experiment};
use crate::harness::io::{read_checkpoint, read_pgm, read_tensor, write_atomic, write_checkpoint, write_pgm, write_tensor, GrayImage, Tensor};
use crate::matching::{build_reference, run_match, LossSpec, MatchConfig, OptimizerKind, ReferenceSource};
use crate::model::Model;
use crate::nn::{train_denoiser, NetMode, ScoreNetwork, TrainConfig};
use crate::real::{cast_vec, norm, sub};
use crate::rng::{normal_vec, stream, Stream};
use crate::schedule::{make_schedule, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Dataset,
    Train,
    Sample,
    Invert,
    Curve,
    Tangent,
    SaliencyStats,
    Agreement,
    Match,
}

#[derive(Debug, Parser)]
#[command(name = "gencurve", about = "Generation curves of diffusion models")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Dataset => "dataset",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Invert => "invert",
            Command::Curve => "curve",
            Command::Tangent => "tangent",
            Command::SaliencyStats => "saliency-stats",
            Command::Agreement => "agreement",
            Command::Match => "match",
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Numeric(_) | Error::Singularity(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("OK {} {}", cli.command.name(), dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command and returns its output directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let mut cfg = Config::load(&cli.config)?;
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    let ctx = Context::new(cfg)?;
    match cli.command {
        Command::Dataset => ctx.dataset()?,
        Command::Train => ctx.train()?,
        Command::Sample => ctx.sample()?,
        Command::Invert => ctx.invert()?,
        Command::Curve => ctx.curve()?,
        Command::Tangent => ctx.tangent()?,
        Command::SaliencyStats => ctx.saliency()?,
        Command::Agreement => ctx.agreement()?,
        Command::Match => ctx.matching()?,
    }
    Ok(ctx.out)
}

fn cfg_err(key: &str, cfg: &Config, message: impl Into<String>) -> Error {
    Error::Config {
        line: cfg.line_of(key).unwrap_or(0),
        message: format!("key `{key}`: {}", message.into()),
    }
}

enum Inputs {
    Blobs(Vec<BlobSample>),
    Rows(Vec<Vec<f32>>),
}

impl Inputs {
    fn rows(&self) -> Vec<Vec<f32>> {
        match self {
            Inputs::Blobs(b) => b.iter().map(|s| cast_vec(&s.image)).collect(),
            Inputs::Rows(r) => r.clone(),
        }
    }
}

struct Context {
    cfg: Config,
    out: PathBuf,
    mode: NetMode,
    seed: u64,
    schedule: NoiseSchedule<f32>,
}

impl Context {
    fn new(cfg: Config) -> Result<Self> {
        let mode_name: String = cfg.get_or("mode", "image16".to_string())?;
        let mode = NetMode::parse(&mode_name).map_err(|e| cfg_err("mode", &cfg, e.to_string()))?;
        let schedule = make_schedule(
            cfg.get_or("T", 1000)?,
            cfg.get_or("beta_start", 1e-4)?,
            cfg.get_or("beta_end", 0.02)?,
            cfg.get_or("ddim_steps", 50)?,
        )
        .map_err(|e| cfg_err("T", &cfg, e.to_string()))?;
        let out = cfg.path("output_dir").unwrap_or_else(|| cfg.base_dir().join("out"));
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self {
            seed: cfg.get_or("seed", 0)?,
            cfg,
            out,
            mode,
            schedule,
        })
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        write_atomic(&self.out.join(name), text.as_bytes())
    }

    fn dim(&self) -> usize {
        self.mode.ambient_dim()
    }

    fn is_image(&self) -> bool {
        self.mode == NetMode::Image16
    }

    fn dataset_name(&self) -> Result<String> {
        let default = if self.is_image() { "blob" } else { "two_moons" };
        self.cfg.get_or("dataset", default.to_string())
    }

    /// Generated dataset named by `dataset`.
    fn generated(&self, n: usize) -> Result<Inputs> {
        let name = self.dataset_name()?;
        if name == "blob" {
            if !self.is_image() {
                return Err(cfg_err("dataset", &self.cfg, "blob images need mode = image16"));
            }
            return Ok(Inputs::Blobs(gen_blob_dataset(n, self.seed)?));
        }
        if self.is_image() {
            return Err(cfg_err("dataset", &self.cfg, "point datasets need mode = point2d"));
        }
        let kind = PointsKind::parse(&name).map_err(|e| cfg_err("dataset", &self.cfg, e.to_string()))?;
        let pts = gen_points_dataset(kind, n, self.cfg.get_or("noise_sigma", 0.1)?, self.seed)?;
        Ok(Inputs::Rows(pts.chunks(2).map(|p| cast_vec(p)).collect()))
    }

    /// Samples from `input_path` (GCT1 rows or one PGM) or, without it, the generated dataset.
    fn inputs(&self, default_n: usize) -> Result<Inputs> {
        let Some(path) = self.cfg.path("input_path") else {
            let n = self.cfg.get_or("n_samples", self.cfg.get_or("n_images", default_n)?)?;
            return self.generated(n);
        };
        if path.extension().is_some_and(|e| e == "pgm") {
            let img = read_pgm(&path)?;
            if img.data.len() != self.dim() {
                return Err(cfg_err("input_path", &self.cfg, format!("image has {} pixels, model needs {}", img.data.len(), self.dim())));
            }
            return Ok(Inputs::Rows(vec![cast_vec(&img.data)]));
        }
        let t = read_tensor(&path)?;
        let rows = if t.data.len() == self.dim() { vec![t.data] } else { t.rows()? };
        if rows.iter().any(|r| r.len() != self.dim()) {
            return Err(cfg_err("input_path", &self.cfg, format!("rows do not have {} values", self.dim())));
        }
        Ok(Inputs::Rows(rows))
    }

    fn chosen(&self, inputs: &Inputs) -> Result<(usize, Vec<f32>)> {
        let index: usize = self.cfg.get_or("index", 0)?;
        let rows = inputs.rows();
        let row = rows
            .get(index)
            .cloned()
            .ok_or_else(|| cfg_err("index", &self.cfg, format!("only {} inputs", rows.len())))?;
        Ok((index, row))
    }

    fn network(&self) -> Result<ScoreNetwork<f32>> {
        let path = self.cfg.require_path("checkpoint_path")?;
        let mut net: ScoreNetwork<f32> = read_checkpoint(&path)?;
        if net.mode() != self.mode {
            return Err(cfg_err(
                "mode",
                &self.cfg,
                format!("checkpoint holds a {} network", net.mode().name()),
            ));
        }
        if let Some(b) = self.cfg.raw("bottleneck") {
            net.set_bottleneck(b).map_err(|e| cfg_err("bottleneck", &self.cfg, e.to_string()))?;
        }
        Ok(net)
    }

    fn curve_options(&self) -> Result<CurveOptions> {
        Ok(CurveOptions {
            k: self.cfg.get_or("K", default_k(self.dim()))?,
            iters: self.cfg.get_or("iters", 30)?,
        })
    }

    fn pixel(&self, key: &str) -> Result<Option<usize>> {
        let Some((r, c)) = self.cfg.pixel(key)? else { return Ok(None) };
        let idx = if self.is_image() {
            if r >= IMAGE_SIDE || c >= IMAGE_SIDE {
                return Err(cfg_err(key, &self.cfg, "pixel outside the 16x16 image"));
            }
            r * IMAGE_SIDE + c
        } else {
            if r != 0 || c >= self.dim() {
                return Err(cfg_err(key, &self.cfg, "coordinate index out of range"));
            }
            c
        };
        Ok(Some(idx))
    }

    fn image(&self, data: &[f32]) -> GrayImage {
        GrayImage {
            width: IMAGE_SIDE,
            height: IMAGE_SIDE,
            data: cast_vec(data),
        }
    }

    fn rows_tensor(&self, rows: &[Vec<f32>]) -> Result<Tensor> {
        let mut dims = vec![rows.len()];
        if self.is_image() {
            dims.extend([IMAGE_SIDE, IMAGE_SIDE]);
        } else {
            dims.push(self.dim());
        }
        Tensor::new(dims, rows.concat())
    }

    fn dataset(&self) -> Result<()> {
        let inputs = self.generated(self.cfg.get_or("n_samples", self.cfg.get_or("n_images", 100)?)?)?;
        let rows = inputs.rows();
        write_tensor(&self.out.join("data.gct"), &self.rows_tensor(&rows)?)?;
        match &inputs {
            Inputs::Blobs(blobs) => {
                let mut csv = String::from("index,salient_row,salient_col,nonsalient_row,nonsalient_col,patch_row,patch_col,patch_size\n");
                for (i, b) in blobs.iter().enumerate() {
                    csv.push_str(&format!(
                        "{i},{},{},{},{},{},{},{}\n",
                        b.salient.row, b.salient.col, b.nonsalient.row, b.nonsalient.col, b.patch.row, b.patch.col, b.patch.size
                    ));
                    write_pgm(&self.out.join(format!("image_{i:04}.pgm")), &self.image(&rows[i]))?;
                    let mask: Vec<f64> = b.patch.mask().iter().map(|&m| if m { 1.0 } else { -1.0 }).collect();
                    write_pgm(&self.out.join(format!("mask_{i:04}.pgm")), &GrayImage { width: IMAGE_SIDE, height: IMAGE_SIDE, data: mask })?;
                }
                self.write("labels.csv", &csv)
            }
            Inputs::Rows(rows) => {
                let mut csv = String::from("x,y\n");
                for r in rows {
                    csv.push_str(&format!("{},{}\n", r[0], r[1]));
                }
                self.write("points.csv", &csv)
            }
        }
    }

    fn train(&self) -> Result<()> {
        let data = self.inputs(if self.is_image() { 512 } else { 4096 })?.rows().concat();
        let mut net = ScoreNetwork::init(self.mode, self.seed);
        let cfg = TrainConfig {
            steps: self.cfg.get_or("train_steps", 4000)?,
            batch: self.cfg.get_or("batch", 64)?,
            lr: self.cfg.get_or("lr", 2e-3)?,
            ema_decay: self.cfg.get_or("ema_decay", 0.999)?,
            seed: self.seed,
            ..TrainConfig::default()
        };
        let report = train_denoiser(&mut net, &self.schedule, &data, &cfg)?;
        let mut csv = String::from("step,loss\n");
        for (s, l) in &report.losses {
            csv.push_str(&format!("{s},{l}\n"));
        }
        self.write("train_loss.csv", &csv)?;
        write_checkpoint(&self.out.join("checkpoint.gckp"), &net)
    }

    fn sample(&self) -> Result<()> {
        let model = Model::Learned(self.network()?);
        let n: usize = self.cfg.get_or("n_samples", 16)?;
        let mut rng = stream(self.seed, Stream::Sample);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let xt: Vec<f32> = normal_vec(&mut rng, self.dim());
            let x0 = self.schedule.transport(&model, &xt, self.schedule.steps(), 0)?;
            if self.is_image() {
                write_pgm(&self.out.join(format!("sample_{i:04}.pgm")), &self.image(&x0))?;
            }
            rows.push(x0);
        }
        write_tensor(&self.out.join("samples.gct"), &self.rows_tensor(&rows)?)
    }

    fn invert(&self) -> Result<()> {
        let model = Model::Learned(self.network()?);
        let rows = self.inputs(16)?.rows();
        let last = self.schedule.steps();
        let mut latents = Vec::with_capacity(rows.len());
        let mut back = Vec::with_capacity(rows.len());
        let mut csv = String::from("index,relative_error\n");
        for (i, x0) in rows.iter().enumerate() {
            let xt = self.schedule.transport(&model, x0, 0, last)?;
            let rec = round_trip(&model, &self.schedule, x0)?;
            let err = norm(&sub(&rec, x0)) / norm(x0).max(f32::MIN_POSITIVE);
            csv.push_str(&format!("{i},{err}\n"));
            latents.push(xt);
            back.push(rec);
        }
        write_tensor(&self.out.join("latents.gct"), &self.rows_tensor(&latents)?)?;
        write_tensor(&self.out.join("roundtrip.gct"), &self.rows_tensor(&back)?)?;
        self.write("roundtrip.csv", &csv)
    }

    fn curve(&self) -> Result<()> {
        let model = Model::Learned(self.network()?);
        let (_, x0) = self.chosen(&self.inputs(1)?)?;
        let engine = CurveEngine::new(&model, &self.schedule, self.curve_options()?);
        let pixel = self.pixel("reference_pixel")?;
        let methods: Vec<CurveMethod> = match self.cfg.raw("method") {
            None | Some("all") => CurveMethod::RATES.to_vec(),
            Some(m) => vec![CurveMethod::parse(m).map_err(|e| cfg_err("method", &self.cfg, e.to_string()))?],
        };
        if let Some(p) = pixel {
            for &m in &methods {
                if m == CurveMethod::StateDeriv {
                    continue;
                }
                let c = engine.curve(&x0, &Direction::UnitPixel(p), m)?;
                self.write(&format!("curve_{}.csv", m.name()), &c.to_csv())?;
            }
        }
        if let Some(set) = self.mask()? {
            for &m in &methods {
                let c = if m == CurveMethod::StateDeriv {
                    engine.state_curve(&x0, &set)?
                } else {
                    engine.marginalized_curve(&x0, &set, m)?
                };
                self.write(&format!("marginal_{}.csv", m.name()), &c.to_csv())?;
            }
        } else if pixel.is_none() {
            return Err(Error::Config {
                line: 0,
                message: "curve needs `reference_pixel` or `mask_path`".into(),
            });
        }
        Ok(())
    }

    fn tangent(&self) -> Result<()> {
        let model = Model::Learned(self.network()?);
        let inputs = self.inputs(1)?;
        let (_, x0) = self.chosen(&inputs)?;
        let engine = CurveEngine::new(&model, &self.schedule, self.curve_options()?);
        let pos = self.schedule.nearest_position(self.cfg.get_or("timestep", 500)?);
        let basis = engine.tangent_basis(&x0, pos)?;
        let mut csv = String::from("index,sigma\n");
        for (i, s) in basis.sigmas.iter().enumerate() {
            csv.push_str(&format!("{i},{s}\n"));
        }
        self.write("sigmas.csv", &csv)?;
        write_tensor(&self.out.join("basis.gct"), &Tensor::from_reals(vec![basis.k(), self.dim()], &basis.vectors.concat())?)?;
        let t_max = self.schedule.timesteps();
        let table = stretch_stats(
            &model,
            &self.schedule,
            &[x0],
            StretchOptions {
                t_lo: t_max / 10,
                t_hi: 9 * t_max / 10,
                per_sample: None,
                power_iters: self.cfg.get_or("iters", 30)?,
                seed: self.seed,
            },
        )?;
        self.write("stretch.csv", &table.to_csv())
    }

    fn saliency(&self) -> Result<()> {
        let model = Model::Learned(self.network()?);
        let blobs = gen_blob_dataset(self.cfg.get_or("n_images", 100)?, self.seed)?;
        let engine = CurveEngine::new(&model, &self.schedule, self.curve_options()?);
        let report = saliency_experiment(&engine, &blobs, self.cfg.get_or("window_k", 5)?, self.cfg.get_or("t_min", 200)?)?;
        self.write("saliency.csv", &report.to_csv())?;
        self.write("summary.csv", &report.summary_csv())
    }

    fn agreement(&self) -> Result<()> {
        let model = Model::Learned(self.network()?);
        let rows = self.inputs(5)?.rows();
        let engine = CurveEngine::new(&model, &self.schedule, self.curve_options()?);
        let report = agreement_experiment(&engine, &rows, self.cfg.get_or("n_pixels", 20)?, self.seed)?;
        for r in &report.rows {
            self.write(&format!("curves_{:03}_{:03}.csv", r.image, r.pixel), &r.curves_csv())?;
        }
        self.write("agreement.csv", &report.to_csv())?;
        let tol = (0.15 * self.schedule.timesteps() as f64).round() as usize;
        self.write("summary.csv", &report.summary_csv(tol))
    }

    /// Patch from `mask_path`: pixels with a positive value (PGM or GCT1).
    fn mask(&self) -> Result<Option<PixelSet>> {
        let Some(path) = self.cfg.path("mask_path") else { return Ok(None) };
        let values: Vec<f64> = if path.extension().is_some_and(|e| e == "pgm") {
            read_pgm(&path)?.data
        } else {
            read_tensor(&path)?.to_reals()
        };
        if values.len() != self.dim() {
            return Err(cfg_err("mask_path", &self.cfg, format!("mask has {} entries, model needs {}", values.len(), self.dim())));
        }
        let mask: Vec<bool> = values.iter().map(|&v| v > 0.0).collect();
        PixelSet::from_mask(&mask)
            .map(Some)
            .map_err(|e| cfg_err("mask_path", &self.cfg, e.to_string()))
    }

    fn matching(&self) -> Result<()> {
        let model = Model::Learned(self.network()?);
        let inputs = self.inputs(1)?;
        let (index, x0) = self.chosen(&inputs)?;
        let set = match (self.mask()?, &inputs) {
            (Some(s), _) => s,
            (None, Inputs::Blobs(b)) => PixelSet::uniform(b[index].patch.pixels())?,
            (None, Inputs::Rows(_)) => {
                return Err(Error::Config {
                    line: 0,
                    message: "match needs `mask_path`".into(),
                })
            }
        };
        let engine = CurveEngine::new(&model, &self.schedule, self.curve_options()?);
        let t_b: usize = self.cfg.get_or("t_b", 200)?;
        let t_min: usize = self.cfg.get_or("t_min", t_b)?;
        let variant: String = self.cfg.get_or("loss_variant", "match_reference".to_string())?;
        let lambda1: f64 = self.cfg.get_or("lambda1", 50.0)?;
        let spec = match variant.as_str() {
            "match_reference" => {
                let source = self.pixel("reference_pixel")?;
                let reference = build_reference(
                    &engine,
                    &x0,
                    source.map_or(ReferenceSource::PseudoFloor { t_min: t_b }, ReferenceSource::Pixel),
                )?;
                self.write("reference.csv", &reference.to_csv())?;
                LossSpec::MatchReference {
                    reference,
                    source_pixel: source,
                }
            }
            "suppress" => LossSpec::Suppress { t_min },
            "amplify" => LossSpec::Amplify {
                t_min,
                lambda1,
                lambda2: self.cfg.get_or("lambda2", -1.0)?,
            },
            "suppress_aligned" => LossSpec::SuppressAligned { t_min, lambda1 },
            other => return Err(cfg_err("loss_variant", &self.cfg, format!("unknown variant `{other}`"))),
        };
        let optimizer = OptimizerKind::parse(&self.cfg.get_or("optimizer", "adam".to_string())?)
            .map_err(|e| cfg_err("optimizer", &self.cfg, e.to_string()))?;
        let defaults = MatchConfig::default();
        let config = MatchConfig {
            t_opt: self.cfg.get_or("t_opt", defaults.t_opt)?,
            eta: self.cfg.get_or("eta", defaults.eta)?,
            iters: self.cfg.get_or("N", defaults.iters)?,
            refresh_m: self.cfg.get_or("m", defaults.refresh_m)?,
            blend_every: self.cfg.get_or("blend_every", defaults.blend_every)?,
            t_blend: self.cfg.get_or("t_blend", defaults.t_blend)?,
            t_b,
            blending: self.cfg.get_bool("blending", true)?,
            optimizer,
            full_marginal: self.cfg.get_bool("full_marginal", false)?,
            through_transport: self.cfg.get_bool("through_transport", false)?,
            seed: self.seed,
        };
        let res = run_match(&engine, &x0, &set, &spec, &config)?;
        if let Some(reference) = &res.reference {
            let mut csv = String::from("curve,l1,tv\n");
            for (name, c) in [("before", &res.curve_before), ("after", &res.curve_after)] {
                let (l1, tv) = curve_distances(c, reference);
                csv.push_str(&format!("{name},{l1},{tv}\n"));
            }
            self.write("distance.csv", &csv)?;
        }
        if self.is_image() {
            write_pgm(&self.out.join("result.pgm"), &self.image(&res.x0_out))?;
        }
        write_tensor(&self.out.join("result.gct"), &self.rows_tensor(&[res.x0_out.clone()])?)?;
        self.write("loss.csv", &res.loss_csv())?;
        self.write("curve_before.csv", &res.curve_before.to_csv())?;
        self.write("curve_after.csv", &res.curve_after.to_csv())?;
        self.write("blend_events.csv", &res.blend_csv())
    }
}

/// Invert-then-generate round trip of one state.
pub fn round_trip<S: crate::real::Real>(model: &Model<S>, schedule: &NoiseSchedule<S>, x0: &[S]) -> Result<Vec<S>> {
    let up = schedule.transport(model, x0, 0, schedule.steps())?;
    schedule.transport(model, &up, schedule.steps(), 0)
}
