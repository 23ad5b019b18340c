//! Command line for the sparse voxel VAE toolkit: synthetic data, training,
//! encoding/decoding, reconstruction metrics, and latent classification.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Every stochastic step
//! derives from --seed, so identical invocations produce identical bytes.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use svx_core::analysis::{
    self, classification_report, cross_validate, evaluate_classifier, latent_descriptor,
    mlp_predict, mlp_train, MlpClassifier, MlpConfig, PcaModel,
};
use svx_core::autodiff::ParamStore;
use svx_core::error::{FormatError, SvxError, SvxResult};
use svx_core::io::{self, CheckpointEntry, CheckpointFile};
use svx_core::matrix::Matrix;
use svx_core::metrics::{self, EvalRow};
use svx_core::model::{self, build_params, LatentCode, ModelConfig, LATENT_STRIDE};
use svx_core::optim::{self, load_checkpoint, TrainConfig};
use svx_core::synth::{self, add_anomaly, generate_tree, AnomalyKind, TreeParams};
use svx_core::voxel::{Dims, VoxelGrid};

#[derive(Parser)]
#[command(name = "svx", version, about = "Sparse voxel VAE toolkit")]
struct Cli {
    /// Seed for anything stochastic (generation, init, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Model config file of key=value lines; omitted means the desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Zero-pad mask dims up to the next multiple of 8 before encoding
    /// instead of rejecting them.
    #[arg(long, global = true)]
    pad8: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic vessel-tree masks plus a labels.csv manifest.
    GenSynth {
        /// Number of samples.
        #[arg(long, default_value_t = 12)]
        count: usize,
        /// healthy, aneurysm, stenosis, or mixed (alternating healthy and
        /// aneurysm).
        #[arg(long, default_value = "healthy")]
        kind: String,
        /// Cubic grid edge in voxels; must be a multiple of 8.
        #[arg(long, default_value_t = 64)]
        extent: u32,
    },
    /// Train a model on a directory of SVOX masks.
    Train {
        /// Directory of *.svox training masks.
        #[arg(long)]
        data: PathBuf,
        /// Mask scored for the validation dice column; defaults to the
        /// first training file.
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        /// Steps between checkpoints and validation scoring.
        #[arg(long, default_value_t = 100)]
        checkpoint_every: u64,
        /// KL weight; defaults to the model config's value.
        #[arg(long)]
        beta: Option<f64>,
        /// Continue from a checkpoint (its embedded config wins; --epochs
        /// is the run's total, not an increment).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode a mask into a latent file and report compression ratios.
    Encode {
        /// Checkpoint holding parameters and model config.
        #[arg(long)]
        model: PathBuf,
        /// Input SVOX mask.
        #[arg(long)]
        input: PathBuf,
    },
    /// Decode a latent file into a mask (probabilities binarized at 0.5).
    Decode {
        #[arg(long)]
        model: PathBuf,
        /// Input SVLZ latent.
        #[arg(long)]
        input: PathBuf,
    },
    /// Encode then decode with the mean latent code; reports Dice.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Dice/clDice/Betti table between two directories of masks.
    Eval {
        /// Directory of predicted masks.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference masks; every *.svox here must have a
        /// same-named prediction.
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Fit descriptor -> PCA -> MLP on a labeled mask directory; prints
    /// 3-fold cross-validation scores and writes the classifier.
    ClassifyTrain {
        #[arg(long)]
        model: PathBuf,
        /// Directory with masks and labels.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a saved classifier on a labeled mask directory.
    ClassifyEval {
        #[arg(long)]
        model: PathBuf,
        /// Classifier file written by classify-train.
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the header of an SVOX/SVLZ/SVCK file.
    Info { input: PathBuf },
}

enum Failure {
    Usage(String),
    Data(SvxError),
}

impl From<SvxError> for Failure {
    fn from(e: SvxError) -> Failure {
        Failure::Data(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match &cli.cmd {
        Cmd::GenSynth { count, kind, extent } => gen_synth(&cli, *count, kind, *extent),
        Cmd::Train { .. } => train(&cli),
        Cmd::Encode { model, input } => encode(&cli, model, input),
        Cmd::Decode { model, input } => decode(&cli, model, input),
        Cmd::Reconstruct { model, input } => reconstruct(&cli, model, input),
        Cmd::Eval { pred, reference } => eval(&cli, pred, reference),
        Cmd::ClassifyTrain { model, data } => classify_train(&cli, model, data),
        Cmd::ClassifyEval { model, classifier, data } => {
            classify_eval(model, classifier, data, cli.pad8)
        }
        Cmd::Info { input } => info(input),
    }
}

fn require_out<'a>(cli: &'a Cli, what: &str) -> Result<&'a PathBuf, Failure> {
    cli.out.as_ref().ok_or_else(|| Failure::Usage(format!("--out is required ({what})")))
}

fn model_config(cli: &Cli) -> Result<ModelConfig, Failure> {
    match &cli.config {
        None => Ok(ModelConfig::desk()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Data(SvxError::Io { path: path.clone(), detail: e.to_string() })
            })?;
            Ok(ModelConfig::from_text(&text)?)
        }
    }
}

/// Load a mask and make its dims 8-divisible, either by padding (--pad8) or
/// by rejecting. Returns the grid and its pre-padding dims.
fn load_mask_8(path: &Path, pad8: bool) -> Result<(VoxelGrid, Dims), Failure> {
    let grid = io::read_svox(path)?;
    let original = grid.dims();
    if grid.dims().divisible_by(8) {
        return Ok((grid, original));
    }
    if pad8 {
        return Ok((grid.padded_to_multiple(8), original));
    }
    Err(Failure::Data(SvxError::DimsNotDivisibleBy8 { dims: original.as_tuple() }))
}

fn list_svox(dir: &Path) -> SvxResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| SvxError::Io { path: dir.to_path_buf(), detail: e.to_string() })?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "svox"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(SvxError::EmptyInput("no .svox files in directory"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

fn gen_synth(cli: &Cli, count: usize, kind: &str, extent: u32) -> CliResult {
    let dir = require_out(cli, "directory for masks and labels.csv")?.clone();
    let anomaly_of = |i: usize| -> Result<Option<AnomalyKind>, Failure> {
        match kind {
            "healthy" => Ok(None),
            "aneurysm" => Ok(Some(AnomalyKind::AneurysmBlob)),
            "stenosis" => Ok(Some(AnomalyKind::StenosisPinch)),
            "mixed" => Ok((i % 2 == 1).then_some(AnomalyKind::AneurysmBlob)),
            other => Err(Failure::Usage(format!(
                "unknown kind {other:?} (healthy, aneurysm, stenosis, mixed)"
            ))),
        }
    };
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let params = TreeParams {
            dims: Dims::new(extent, extent, extent),
            seed: cli.seed.wrapping_add(i as u64),
            ..TreeParams::desk(0)
        };
        let mut sample = generate_tree(&params)?;
        if let Some(kind) = anomaly_of(i)? {
            sample = add_anomaly(&sample, kind, params.seed.wrapping_add(0x517c_c1b7))?;
        }
        samples.push((format!("sample-{i:03}"), sample));
    }
    let manifest = synth::write_dataset(&dir, &samples)?;
    println!("wrote {count} masks and {} to {}", manifest.display(), dir.display());
    Ok(())
}

fn train(cli: &Cli) -> CliResult {
    let Cmd::Train {
        data,
        held_out,
        epochs,
        lr,
        batch_size,
        checkpoint_every,
        beta,
        resume,
    } = &cli.cmd
    else {
        unreachable!()
    };
    let out_dir = require_out(cli, "directory for checkpoints and metrics.log")?.clone();
    let model_cfg = model_config(cli)?;
    let dataset = list_svox(data)?;
    let held_out = held_out.clone().unwrap_or_else(|| dataset[0].clone());
    let tc = TrainConfig {
        epochs: *epochs,
        lr: *lr,
        seed: cli.seed,
        batch_size: *batch_size,
        dataset,
        held_out,
        checkpoint_every: *checkpoint_every,
        out_dir,
        beta: beta.unwrap_or(model_cfg.beta),
    };
    let outcome = match resume {
        Some(ckpt) => optim::resume(ckpt, &tc)?,
        None => {
            let init = build_params(&model_cfg, cli.seed)?;
            optim::train(&model_cfg, init, &tc)?
        }
    };
    if let Some(last) = outcome.log.lines().last() {
        println!("{}", outcome.log.lines().next().unwrap_or(""));
        println!("{last}");
    }
    println!(
        "trained {} steps; best validation dice {:.4}",
        outcome.steps, outcome.best_dice
    );
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("best checkpoint:  {}", outcome.best_checkpoint.display());
    Ok(())
}

fn encode(cli: &Cli, model: &Path, input: &Path) -> CliResult {
    let out = require_out(cli, "path for the latent file")?;
    let loaded = load_checkpoint(model)?;
    let (grid, original) = load_mask_8(input, cli.pad8)?;
    let post = model::encode(&grid, &loaded.model_cfg, &loaded.params)?;
    let code = model::reparameterize(&post, cli.seed);
    io::write_latent(out, &post, &code)?;

    let report = model::compression_report(&grid, &post, loaded.model_cfg.latent_channels)?;
    if original != grid.dims() {
        let (oh, ow, od) = original.as_tuple();
        println!("padded {oh}x{ow}x{od} up to a multiple of 8");
    }
    let (h, w, d) = grid.dims().as_tuple();
    let (lh, lw, ld) = report.latent_extent.as_tuple();
    println!(
        "encoded {}: dims {h}x{w}x{d}, active voxels {}",
        input.display(),
        report.active_voxels
    );
    println!(
        "latent grid {lh}x{lw}x{ld} (stride {LATENT_STRIDE}), channels {}, tokens {}",
        loaded.model_cfg.latent_channels, report.latent_tokens
    );
    let (sx, sy, sz) = report.spatial_ratio;
    println!(
        "spatial compression r_s = {sx}x{sy}x{sz}, volumetric compression r = {}",
        report.volumetric_ratio
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn decode(cli: &Cli, model: &Path, input: &Path) -> CliResult {
    let out = require_out(cli, "path for the decoded mask")?;
    let loaded = load_checkpoint(model)?;
    let (_post, code) = io::read_latent(input)?;
    let recon = model::decode(&code, &loaded.model_cfg, &loaded.params)?;
    let mask = recon.binarize();
    io::write_svox(out, &mask)?;
    let (h, w, d) = mask.dims().as_tuple();
    println!(
        "decoded {}: dims {h}x{w}x{d}, support {}, voxels on {}",
        input.display(),
        recon.coords.len(),
        mask.active_count()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn reconstruct(cli: &Cli, model: &Path, input: &Path) -> CliResult {
    let out = require_out(cli, "path for the reconstructed mask")?;
    let loaded = load_checkpoint(model)?;
    let (grid, original) = load_mask_8(input, cli.pad8)?;
    let post = model::encode(&grid, &loaded.model_cfg, &loaded.params)?;
    // Mean code: reconstruction is deterministic, no sampling noise.
    let code = LatentCode {
        coords: post.coords.clone(),
        z: post.mu.clone(),
        dims: post.dims,
        stride: LATENT_STRIDE,
    };
    let recon = model::decode(&code, &loaded.model_cfg, &loaded.params)?;
    let mut mask = recon.binarize();
    if mask.dims() != original {
        mask = mask.cropped_to(original)?;
    }
    io::write_svox(out, &mask)?;
    let reference = io::read_svox(input)?;
    let dice = metrics::dice(&mask, &reference)?;
    println!("reconstructed {} -> {}", input.display(), out.display());
    println!("dice against input: {dice:.4}");
    Ok(())
}

fn eval(cli: &Cli, pred_dir: &Path, ref_dir: &Path) -> CliResult {
    let refs = list_svox(ref_dir)?;
    let mut rows = Vec::with_capacity(refs.len());
    for ref_path in &refs {
        let name = ref_path.file_name().unwrap().to_string_lossy().into_owned();
        let pred_path = pred_dir.join(&name);
        if !pred_path.exists() {
            return Err(Failure::Data(SvxError::Io {
                path: pred_path,
                detail: "prediction file missing".to_string(),
            }));
        }
        let pred = io::read_svox(&pred_path)?;
        let reference = io::read_svox(ref_path)?;
        let (d_beta0, d_beta1) = metrics::betti_errors(&pred, &reference)?;
        rows.push(EvalRow {
            sample: name,
            dice: metrics::dice(&pred, &reference)?,
            cl_dice: metrics::cl_dice(&pred, &reference)?,
            d_beta0,
            d_beta1,
        });
    }
    let report = metrics::evaluation_report(&rows);
    print!("{report}");
    if let Some(out) = &cli.out {
        std::fs::write(out, &report)
            .map_err(|e| SvxError::Io { path: out.clone(), detail: e.to_string() })?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Classification plumbing

/// Labeled descriptor rows for every mask in a manifest directory.
fn descriptor_table(
    model: &Path,
    data: &Path,
    pad8: bool,
) -> Result<(Matrix<f64>, Vec<String>, Vec<String>), Failure> {
    let loaded = load_checkpoint(model)?;
    let manifest = synth::read_label_manifest(&data.join("labels.csv"))?;
    if manifest.is_empty() {
        return Err(Failure::Data(SvxError::EmptyInput("labels.csv")));
    }
    let mut rows = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    let mut files = Vec::with_capacity(manifest.len());
    for (file, label) in manifest {
        let (grid, _) = load_mask_8(&data.join(&file), pad8)?;
        let post = model::encode(&grid, &loaded.model_cfg, &loaded.params)?;
        rows.push(latent_descriptor(&post, analysis::DESCRIPTOR_GRID)?);
        labels.push(label.as_str().to_string());
        files.push(file);
    }
    Ok((Matrix::from_rows(&rows)?, labels, files))
}

fn label_indices(labels: &[String], names: &[String]) -> SvxResult<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            names.iter().position(|n| n == l).ok_or_else(|| {
                FormatError::BadConfigLine { line: format!("label {l} unknown to classifier") }
                    .into()
            })
        })
        .collect()
}

fn classify_train(cli: &Cli, model: &Path, data: &Path) -> CliResult {
    let out = require_out(cli, "path for the classifier file")?;
    let (table, labels, _) = descriptor_table(model, data, cli.pad8)?;
    let mut names = labels.clone();
    names.sort();
    names.dedup();
    if names.len() < 2 {
        return Err(Failure::Data(SvxError::SingleClass));
    }
    let indices = label_indices(&labels, &names)?;

    let m = table.rows();
    let smallest_train = m - m.div_ceil(3);
    let k = analysis::PCA_COMPONENTS.min(table.cols()).min(smallest_train);
    let cfg = MlpConfig { seed: cli.seed, ..Default::default() };
    let scores = cross_validate(&table, &indices, 3, Some(k), &cfg)?;
    print!("{}", classification_report(&scores));

    let pca = analysis::pca_fit(&table, k)?;
    let projected_rows: Vec<Vec<f64>> = (0..m)
        .map(|r| analysis::pca_transform(&pca, table.row(r)))
        .collect::<SvxResult<_>>()?;
    let clf = mlp_train(&Matrix::from_rows(&projected_rows)?, &indices, &cfg)?;
    save_classifier(out, &pca, &clf, &names)?;
    println!("wrote classifier {} ({} samples, {} pca components)", out.display(), m, k);
    Ok(())
}

fn classify_eval(model: &Path, classifier: &Path, data: &Path, pad8: bool) -> CliResult {
    let (pca, clf, names) = load_classifier(classifier)?;
    let (table, labels, files) = descriptor_table(model, data, pad8)?;
    let truth = label_indices(&labels, &names)?;
    let mut preds = Vec::with_capacity(truth.len());
    for r in 0..table.rows() {
        let projected = analysis::pca_transform(&pca, table.row(r))?;
        let (class, _) = mlp_predict(&clf, &projected)?;
        println!("{}, {}, {}", files[r], labels[r], names[class]);
        preds.push(class);
    }
    let (bacc, f1) = evaluate_classifier(&preds, &truth)?;
    println!("balanced_accuracy = {bacc:.4}");
    println!("macro_f1 = {f1:.4}");
    Ok(())
}

fn mat_entry(name: &str, m: &Matrix<f64>) -> CheckpointEntry {
    CheckpointEntry {
        name: name.to_string(),
        dims: vec![m.rows() as u32, m.cols() as u32],
        data: m.data().iter().map(|&v| v as f32).collect(),
    }
}

fn save_classifier(
    path: &Path,
    pca: &PcaModel,
    clf: &MlpClassifier,
    names: &[String],
) -> SvxResult<()> {
    let vec_entry = |name: &str, v: &[f64]| CheckpointEntry {
        name: name.to_string(),
        dims: vec![1, v.len() as u32],
        data: v.iter().map(|&x| x as f32).collect(),
    };
    let mut entries = vec![
        vec_entry("pca.mean", &pca.mean),
        mat_entry("pca.components", &pca.components),
        vec_entry("pca.eigenvalues", &pca.eigenvalues),
        vec_entry("zscore.mean", &clf.feat_mean),
        vec_entry("zscore.std", &clf.feat_std),
    ];
    for id in clf.params.ids() {
        entries.push(mat_entry(clf.params.name(id), clf.params.get(id)));
    }
    let config_text = format!(
        "kind=latent-classifier\nclasses={}\ninformative={}\nlabels={}\n",
        clf.classes,
        pca.informative,
        names.join(",")
    );
    io::write_checkpoint(path, &CheckpointFile { entries, config_text })
}

fn load_classifier(path: &Path) -> SvxResult<(PcaModel, MlpClassifier, Vec<String>)> {
    let ck = io::read_checkpoint(path)?;
    let mut kv = std::collections::HashMap::new();
    for line in ck.config_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let field = |k: &str| -> SvxResult<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| FormatError::BadConfigLine { line: format!("{k} missing") }.into())
    };
    if field("kind")? != "latent-classifier" {
        return Err(FormatError::BadConfigLine { line: "kind mismatch".to_string() }.into());
    }
    let classes: usize = field("classes")?
        .parse()
        .map_err(|_| FormatError::BadConfigLine { line: "classes".to_string() })?;
    let informative: usize = field("informative")?
        .parse()
        .map_err(|_| FormatError::BadConfigLine { line: "informative".to_string() })?;
    let names: Vec<String> = field("labels")?.split(',').map(str::to_string).collect();

    let take = |name: &str| -> SvxResult<Matrix<f64>> {
        let e = ck
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| SvxError::MissingParameter { name: name.to_string() })?;
        if e.dims.len() != 2 {
            return Err(FormatError::ShapeDisagreement {
                name: name.to_string(),
                expected: "rank 2".to_string(),
                got: format!("rank {}", e.dims.len()),
            }
            .into());
        }
        Matrix::from_vec(
            e.dims[0] as usize,
            e.dims[1] as usize,
            e.data.iter().map(|&v| v as f64).collect(),
        )
    };
    let pca = PcaModel {
        mean: take("pca.mean")?.into_data(),
        components: take("pca.components")?,
        eigenvalues: take("pca.eigenvalues")?.into_data(),
        informative,
    };
    let mut params: ParamStore<f64> = ParamStore::new();
    for layer in ["mlp.l1", "mlp.l2", "mlp.l3"] {
        for part in ["w", "b"] {
            let name = format!("{layer}.{part}");
            params.insert(&name, take(&name)?)?;
        }
    }
    let clf = MlpClassifier {
        params,
        feat_mean: take("zscore.mean")?.into_data(),
        feat_std: take("zscore.std")?.into_data(),
        classes,
    };
    Ok((pca, clf, names))
}

// ---------------------------------------------------------------------------

fn info(input: &Path) -> CliResult {
    let bytes = io::read_file(input)?;
    if bytes.starts_with(io::SVOX_MAGIC) {
        let (dims, coords) = io::read_svox_coords_bytes(&bytes)?;
        let (h, w, d) = dims.as_tuple();
        println!("SVOX mask: dims {h}x{w}x{d}, N={}", coords.len());
    } else if bytes.starts_with(io::SVLZ_MAGIC) {
        let (post, code) = io::read_latent_bytes(&bytes)?;
        let (h, w, d) = post.dims.as_tuple();
        println!(
            "SVLZ latent: dims {h}x{w}x{d}, stride {}, channels {}, N={}",
            code.stride,
            post.mu.cols(),
            post.coords.len()
        );
    } else if bytes.starts_with(io::SVCK_MAGIC) {
        let ck = io::read_checkpoint_bytes(&bytes)?;
        println!("SVCK checkpoint: {} entries", ck.entries.len());
        for e in &ck.entries {
            println!("  {} {:?}", e.name, e.dims);
        }
        for line in ck.config_text.lines() {
            println!("  config {line}");
        }
    } else {
        let found = bytes.iter().take(6).copied().collect();
        return Err(Failure::Data(
            FormatError::BadMagic { expected: "SVOX1/SVLZ1/SVCK1", found }.into(),
        ));
    }
    Ok(())
}
