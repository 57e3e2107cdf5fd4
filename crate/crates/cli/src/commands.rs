//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use frameclass_core::arch::{infer_shapes, parse_arch, print_arch, ArchSpec, DEFAULT_ARCH};
use frameclass_core::classifiers::{
    knn_predict, svm_predict, svm_train, tree_predict, tree_train, FeatureRecord, FeatureSet,
};
use frameclass_core::dataio::{
    decode_image, load_manifest, preprocess, save_manifest, DatasetManifest, PreprocessConfig,
};
use frameclass_core::eval::{
    confusion, majority_vote, split_by_video, video_accuracy, videos_per_class,
};
use frameclass_core::finetune::{
    replace_head, sweep_layer_size, train_head, FinetuneConfig, SWEEP_GRANULARITY,
};
use frameclass_core::network::{
    concat_features, init_weights, load_weights, save_weights, Mode, Network,
};
use frameclass_core::rng;
use frameclass_core::Error;

use crate::CliError;

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser)]
#[command(
    name = "frameclass",
    version,
    about = "CNN feature extraction and classical classification for frame datasets"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the bundled default architecture config.
    Arch(ArchCmd),
    /// Write randomly initialized weights for an architecture.
    InitWeights(InitWeightsCmd),
    /// Split a manifest into train/test, keeping each video on one side.
    Split(SplitCmd),
    /// Run images through the network and save tapped feature vectors.
    Extract(ExtractCmd),
    /// Fine-tune the fully connected head on a training manifest.
    Finetune(FinetuneCmd),
    /// Train a classifier on one FEAT file and predict another.
    Classify(ClassifyCmd),
    /// Score predictions against a truth manifest.
    Evaluate(EvaluateCmd),
    /// Search fully connected layer sizes by midpoint refinement.
    Sweep(SweepCmd),
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Arch(cmd) => run_arch(cmd),
        Command::InitWeights(cmd) => run_init_weights(cmd),
        Command::Split(cmd) => run_split(cmd),
        Command::Extract(cmd) => run_extract(cmd),
        Command::Finetune(cmd) => run_finetune(cmd),
        Command::Classify(cmd) => run_classify(cmd),
        Command::Evaluate(cmd) => run_evaluate(cmd),
        Command::Sweep(cmd) => run_sweep(cmd),
    }
}

fn echo_config(pairs: &[(&str, String)]) {
    for (key, value) in pairs {
        println!("config {key}={value}");
    }
}

fn load_arch(path: &Option<PathBuf>) -> CliResult<ArchSpec> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(Error::from)?;
            Ok(parse_arch(&text)?)
        }
        None => Ok(parse_arch(DEFAULT_ARCH)?),
    }
}

fn arch_label(path: &Option<PathBuf>) -> String {
    path.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "<bundled default>".to_string())
}

// ---------------------------------------------------------------------------
// shared flag groups

#[derive(Args)]
struct PreprocessArgs {
    /// Shorter-side resize target (defaults to the crop size when that is
    /// larger than 256).
    #[arg(long)]
    resize: Option<usize>,
    /// Square center-crop side; defaults to the architecture's input size.
    #[arg(long)]
    crop: Option<usize>,
    /// Per-channel means to subtract, as r,g,b.
    #[arg(long, default_value = "0,0,0")]
    means: String,
}

impl PreprocessArgs {
    fn resolve(&self, spec: &ArchSpec) -> CliResult<PreprocessConfig> {
        let dims = spec.input.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(usage(format!(
                "architecture input {} is not a 3-channel image",
                spec.input
            )));
        }
        let crop = match self.crop {
            Some(c) => c,
            None if dims[1] == dims[2] => dims[1],
            None => {
                return Err(usage(format!(
                    "architecture input {} is not square; pass --crop explicitly",
                    spec.input
                )))
            }
        };
        if crop != dims[1] || crop != dims[2] {
            return Err(usage(format!(
                "crop {crop} does not match the architecture input {}",
                spec.input
            )));
        }
        let resize = self.resize.unwrap_or_else(|| crop.max(256));
        let means = parse_means(&self.means)?;
        Ok(PreprocessConfig::new(resize, crop, means)?)
    }
}

fn parse_means(text: &str) -> CliResult<[f32; 3]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(usage(format!("means must be r,g,b, got {text:?}")));
    }
    let mut means = [0f32; 3];
    for (slot, part) in means.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f32>()
            .map_err(|_| usage(format!("invalid mean value {part:?}")))?;
    }
    Ok(means)
}

fn means_label(m: &[f32; 3]) -> String {
    format!("{},{},{}", m[0], m[1], m[2])
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Algo {
    Svm,
    Knn,
    Tree,
}

impl Algo {
    fn name(self) -> &'static str {
        match self {
            Algo::Svm => "svm",
            Algo::Knn => "knn",
            Algo::Tree => "tree",
        }
    }
}

#[derive(Args)]
struct ClassifierArgs {
    /// Classifier to run.
    #[arg(long, value_enum)]
    algo: Algo,
    /// SVM box constraint.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Polynomial kernel exponent.
    #[arg(long, default_value_t = 2)]
    exponent: u32,
    /// Neighbor count for knn.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Decision-tree depth limit.
    #[arg(long, default_value_t = 16)]
    max_depth: usize,
    /// Decision-tree minimum node size.
    #[arg(long, default_value_t = 2)]
    min_leaf: usize,
}

impl ClassifierArgs {
    fn echo_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("algo", self.algo.name().to_string()),
            ("c", self.c.to_string()),
            ("exponent", self.exponent.to_string()),
            ("k", self.k.to_string()),
            ("max_depth", self.max_depth.to_string()),
            ("min_leaf", self.min_leaf.to_string()),
        ]
    }

    /// Train on `train` and predict every record of `test`.
    fn predict_all(&self, train: &FeatureSet, test: &FeatureSet) -> CliResult<Vec<usize>> {
        let mut preds = Vec::with_capacity(test.len());
        match self.algo {
            Algo::Svm => {
                let model = svm_train(train, self.c, self.exponent)?;
                for r in &test.records {
                    preds.push(svm_predict(&model, &r.features)?);
                }
            }
            Algo::Knn => {
                for r in &test.records {
                    preds.push(knn_predict(train, self.k, &r.features)?);
                }
            }
            Algo::Tree => {
                let tree = tree_train(train, self.max_depth, self.min_leaf)?;
                for r in &test.records {
                    preds.push(tree_predict(&tree, &r.features)?);
                }
            }
        }
        Ok(preds)
    }
}

// ---------------------------------------------------------------------------
// arch

#[derive(Args)]
struct ArchCmd {
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_arch(cmd: ArchCmd) -> CliResult<()> {
    match cmd.out {
        Some(path) => fs::write(path, DEFAULT_ARCH).map_err(Error::from)?,
        None => print!("{DEFAULT_ARCH}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// init-weights

#[derive(Args)]
struct InitWeightsCmd {
    /// Architecture config; omitted means the bundled default.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn run_init_weights(cmd: InitWeightsCmd) -> CliResult<()> {
    echo_config(&[
        ("arch", arch_label(&cmd.arch)),
        ("seed", cmd.seed.to_string()),
        ("out", cmd.out.display().to_string()),
    ]);
    let spec = load_arch(&cmd.arch)?;
    let net = init_weights(&spec, &mut rng::stream(cmd.seed, "init"))?;
    save_weights(&net, &cmd.out)?;
    println!("wrote {}", cmd.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// split

#[derive(Args)]
struct SplitCmd {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
}

fn run_split(cmd: SplitCmd) -> CliResult<()> {
    if !(cmd.fraction > 0.0 && cmd.fraction < 1.0) {
        return Err(usage(format!(
            "--fraction must be in (0, 1), got {}",
            cmd.fraction
        )));
    }
    echo_config(&[
        ("manifest", cmd.manifest.display().to_string()),
        ("fraction", cmd.fraction.to_string()),
        ("seed", cmd.seed.to_string()),
        ("out_train", cmd.out_train.display().to_string()),
        ("out_test", cmd.out_test.display().to_string()),
    ]);
    let manifest = load_manifest(&cmd.manifest)?;
    let split = split_by_video(&manifest, cmd.fraction, cmd.seed)?;
    save_manifest(&split.train, &cmd.out_train)?;
    save_manifest(&split.test, &cmd.out_test)?;

    let train_counts: BTreeMap<String, usize> =
        videos_per_class(&split.train).into_iter().collect();
    let test_counts: BTreeMap<String, usize> = videos_per_class(&split.test).into_iter().collect();
    println!("class\ttrain_videos\ttest_videos");
    for class in &manifest.classes {
        println!(
            "{class}\t{}\t{}",
            train_counts.get(class).copied().unwrap_or(0),
            test_counts.get(class).copied().unwrap_or(0)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// extract

#[derive(Args)]
struct ExtractCmd {
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Tap layers, comma separated; defaults to the architecture's tap list.
    #[arg(long)]
    taps: Option<String>,
    #[command(flatten)]
    pre: PreprocessArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_taps(text: &str) -> CliResult<Vec<usize>> {
    let mut taps = Vec::new();
    for part in text.split(',') {
        taps.push(
            part.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("invalid tap index {part:?}")))?,
        );
    }
    taps.sort_unstable();
    taps.dedup();
    if taps.is_empty() {
        return Err(usage("tap list is empty"));
    }
    Ok(taps)
}

fn resolve_taps(spec: &ArchSpec, flag: &Option<String>) -> CliResult<Vec<usize>> {
    let taps = match flag {
        Some(text) => parse_taps(text)?,
        None => spec.taps.clone(),
    };
    if taps.is_empty() {
        return Err(usage(
            "no taps requested and the architecture declares none",
        ));
    }
    let fc = spec.fc_indices();
    for t in &taps {
        if !fc.contains(t) {
            return Err(usage(format!("tap {t} does not name an fc layer")));
        }
    }
    Ok(taps)
}

/// Concatenated tap features for every manifest image, in manifest order.
fn extract_features(
    net: &Network,
    manifest: &DatasetManifest,
    taps: &[usize],
    pre: &PreprocessConfig,
) -> CliResult<FeatureSet> {
    let shapes = infer_shapes(net.spec())?;
    let dim: usize = taps.iter().map(|&t| shapes[t - 1].len()).sum();
    let mut set = FeatureSet::new(dim, manifest.classes.clone())?;
    let mut tapped_spec = net.spec().clone();
    tapped_spec.taps = taps.to_vec();
    let net = Network::new(tapped_spec, net.params().to_vec())?;
    for (i, sample) in manifest.samples.iter().enumerate() {
        let img = decode_image(Path::new(&sample.image_path))?;
        let input = preprocess(&img, pre);
        let pass = net.forward(&input, Mode::Infer, None)?;
        let parts: Vec<_> = taps.iter().map(|t| pass.taps[t].clone()).collect();
        let features = concat_features(&parts)?;
        set.push(FeatureRecord {
            features: features.values,
            label: manifest
                .label_index(&sample.label)
                .expect("label in classes"),
            video_id: sample.video_id.clone(),
        })?;
        if (i + 1) % 50 == 0 {
            eprintln!("extracted {}/{}", i + 1, manifest.len());
        }
    }
    Ok(set)
}

fn run_extract(cmd: ExtractCmd) -> CliResult<()> {
    let spec = load_arch(&cmd.arch)?;
    let taps = resolve_taps(&spec, &cmd.taps)?;
    let pre = cmd.pre.resolve(&spec)?;
    echo_config(&[
        ("arch", arch_label(&cmd.arch)),
        ("weights", cmd.weights.display().to_string()),
        ("manifest", cmd.manifest.display().to_string()),
        (
            "taps",
            taps.iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("resize", pre.resize_to.to_string()),
        ("crop", pre.crop.to_string()),
        ("means", means_label(&pre.channel_means)),
        ("out", cmd.out.display().to_string()),
    ]);
    let net = load_weights(&spec, &cmd.weights)?;
    let manifest = load_manifest(&cmd.manifest)?;
    let set = extract_features(&net, &manifest, &taps, &pre)?;
    set.save(&cmd.out)?;
    println!(
        "wrote {} records of dim {} to {}",
        set.len(),
        set.dim,
        cmd.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune

#[derive(Args)]
struct FinetuneCmd {
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Number of classes the new head predicts.
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Head sizes, e.g. "f19=6144" or "19=6144,22=1000".
    #[arg(long)]
    head: Option<String>,
    /// Fully connected layers to update; defaults to all of them.
    #[arg(long)]
    trainable: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    log_stride: usize,
    #[command(flatten)]
    pre: PreprocessArgs,
    #[arg(long)]
    out_weights: PathBuf,
    /// Where to write the resized architecture config.
    #[arg(long)]
    out_arch: PathBuf,
    #[arg(long)]
    out_loss: PathBuf,
}

fn parse_head_sizes(text: &str) -> CliResult<BTreeMap<usize, usize>> {
    let mut sizes = BTreeMap::new();
    for part in text.split(',') {
        let part = part.trim();
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("head spec {part:?} must be layer=size")))?;
        let key = key.trim().trim_start_matches('f').trim_start_matches("fc");
        let layer: usize = key
            .parse()
            .map_err(|_| usage(format!("invalid head layer {part:?}")))?;
        let size: usize = value
            .trim()
            .parse()
            .map_err(|_| usage(format!("invalid head size {part:?}")))?;
        sizes.insert(layer, size);
    }
    Ok(sizes)
}

fn run_finetune(cmd: FinetuneCmd) -> CliResult<()> {
    if cmd.classes < 2 {
        return Err(usage(format!(
            "--classes must be at least 2, got {}",
            cmd.classes
        )));
    }
    let spec = load_arch(&cmd.arch)?;
    let pre = cmd.pre.resolve(&spec)?;
    let head_sizes = match &cmd.head {
        Some(text) => parse_head_sizes(text)?,
        None => BTreeMap::new(),
    };
    let trainable: BTreeSet<usize> = match &cmd.trainable {
        Some(text) => parse_taps(text)?.into_iter().collect(),
        None => BTreeSet::new(), // train_head defaults to every fc layer
    };
    let head_label = if head_sizes.is_empty() {
        "<defaults>".to_string()
    } else {
        head_sizes
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    let trainable_label = if trainable.is_empty() {
        "<all fc layers>".to_string()
    } else {
        trainable
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    echo_config(&[
        ("arch", arch_label(&cmd.arch)),
        ("weights", cmd.weights.display().to_string()),
        ("manifest", cmd.manifest.display().to_string()),
        ("classes", cmd.classes.to_string()),
        ("learning_rate", cmd.lr.to_string()),
        ("iterations", cmd.iters.to_string()),
        ("batch_size", cmd.batch.to_string()),
        ("head", head_label),
        ("trainable", trainable_label),
        ("seed", cmd.seed.to_string()),
        ("log_stride", cmd.log_stride.to_string()),
        ("resize", pre.resize_to.to_string()),
        ("crop", pre.crop.to_string()),
        ("means", means_label(&pre.channel_means)),
        ("out_weights", cmd.out_weights.display().to_string()),
        ("out_arch", cmd.out_arch.display().to_string()),
        ("out_loss", cmd.out_loss.display().to_string()),
    ]);

    let net = load_weights(&spec, &cmd.weights)?;
    let manifest = load_manifest(&cmd.manifest)?;
    if manifest.classes.len() != cmd.classes {
        return Err(CliError::Core(Error::Data(format!(
            "manifest has {} classes but --classes says {}",
            manifest.classes.len(),
            cmd.classes
        ))));
    }
    let net = replace_head(
        &net,
        &head_sizes,
        cmd.classes,
        &mut rng::stream(cmd.seed, "init"),
    )?;
    let cfg = FinetuneConfig {
        learning_rate: cmd.lr,
        iterations: cmd.iters,
        batch_size: cmd.batch,
        trainable,
        seed: cmd.seed,
        log_stride: cmd.log_stride,
    };
    let (trained, log) = train_head(&net, &manifest, &pre, &cfg)?;
    save_weights(&trained, &cmd.out_weights)?;
    fs::write(&cmd.out_arch, print_arch(trained.spec())).map_err(Error::from)?;
    fs::write(&cmd.out_loss, log.to_tsv()).map_err(Error::from)?;
    if let Some((iter, loss)) = log.entries().last() {
        println!("final logged loss at iteration {iter}: {loss}");
    }
    println!("wrote {}", cmd.out_weights.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// classify

#[derive(Args)]
struct ClassifyCmd {
    /// Training FEAT file.
    #[arg(long)]
    train: PathBuf,
    /// FEAT file to predict.
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    classifier: ClassifierArgs,
    #[arg(long)]
    out: PathBuf,
}

fn run_classify(cmd: ClassifyCmd) -> CliResult<()> {
    let mut pairs = vec![
        ("train", cmd.train.display().to_string()),
        ("test", cmd.test.display().to_string()),
    ];
    pairs.extend(cmd.classifier.echo_pairs());
    pairs.push(("out", cmd.out.display().to_string()));
    echo_config(&pairs);

    let train = FeatureSet::load(&cmd.train)?;
    let test = FeatureSet::load(&cmd.test)?;
    if train.dim != test.dim {
        return Err(CliError::Core(Error::Shape(format!(
            "train dim {} does not match test dim {}",
            train.dim, test.dim
        ))));
    }
    if train.classes != test.classes {
        return Err(CliError::Core(Error::Data(
            "train and test FEAT files carry different class tables".into(),
        )));
    }
    let preds = cmd.classifier.predict_all(&train, &test)?;
    let mut out = String::new();
    for (i, (record, pred)) in test.records.iter().zip(&preds).enumerate() {
        out.push_str(&format!(
            "{i}\t{}\t{}\n",
            record.video_id, test.classes[*pred]
        ));
    }
    fs::write(&cmd.out, out).map_err(Error::from)?;
    println!("wrote {} predictions to {}", preds.len(), cmd.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Args)]
struct EvaluateCmd {
    /// Predictions file from `classify`.
    #[arg(long)]
    predictions: PathBuf,
    /// Truth manifest matching the predicted records, in order.
    #[arg(long)]
    manifest: PathBuf,
    /// Also vote per video and report video accuracy.
    #[arg(long)]
    by_video: bool,
    /// Write the confusion matrix to a file as well.
    #[arg(long)]
    out_matrix: Option<PathBuf>,
}

fn run_evaluate(cmd: EvaluateCmd) -> CliResult<()> {
    echo_config(&[
        ("predictions", cmd.predictions.display().to_string()),
        ("manifest", cmd.manifest.display().to_string()),
        ("by_video", cmd.by_video.to_string()),
    ]);
    let manifest = load_manifest(&cmd.manifest)?;
    let text = fs::read_to_string(&cmd.predictions).map_err(Error::from)?;

    let mut preds: Vec<Option<(String, usize)>> = vec![None; manifest.len()];
    let mut count = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CliError::Core(Error::Parse {
                line: lineno + 1,
                msg: format!(
                    "expected index<TAB>video_id<TAB>label, got {} field(s)",
                    fields.len()
                ),
            }));
        }
        let index: usize = fields[0].parse().map_err(|_| {
            CliError::Core(Error::Parse {
                line: lineno + 1,
                msg: format!("invalid sample index {:?}", fields[0]),
            })
        })?;
        if index >= manifest.len() {
            return Err(CliError::Core(Error::Data(format!(
                "prediction index {index} out of range for {} samples",
                manifest.len()
            ))));
        }
        if preds[index].is_some() {
            return Err(CliError::Core(Error::Data(format!(
                "duplicate prediction for sample {index}"
            ))));
        }
        let label = manifest.label_index(fields[2]).ok_or_else(|| {
            CliError::Core(Error::Data(format!(
                "predicted label {:?} is not in the manifest classes",
                fields[2]
            )))
        })?;
        preds[index] = Some((fields[1].to_string(), label));
        count += 1;
    }
    if count == 0 {
        return Err(CliError::Core(Error::Data(
            "predictions file is empty".into(),
        )));
    }
    if count != manifest.len() {
        return Err(CliError::Core(Error::Data(format!(
            "{count} predictions for {} manifest samples",
            manifest.len()
        ))));
    }
    let mut pred_labels = Vec::with_capacity(manifest.len());
    let mut truth_labels = Vec::with_capacity(manifest.len());
    let mut frame_votes = Vec::with_capacity(manifest.len());
    for (sample, slot) in manifest.samples.iter().zip(&preds) {
        let (video_id, label) = slot.as_ref().expect("all indices filled");
        if video_id != &sample.video_id {
            return Err(CliError::Core(Error::Data(format!(
                "prediction video id {video_id:?} does not match manifest {:?}",
                sample.video_id
            ))));
        }
        pred_labels.push(*label);
        truth_labels.push(
            manifest
                .label_index(&sample.label)
                .expect("label in classes"),
        );
        frame_votes.push((sample.video_id.clone(), *label));
    }

    let matrix = confusion(&pred_labels, &truth_labels, &manifest.classes)?;
    print!("{}", matrix.to_tsv());
    let frame_acc = matrix.accuracy()?;
    println!(
        "frame accuracy: {:.4} ({:.2}%)",
        frame_acc,
        frame_acc * 100.0
    );
    if let Some(path) = &cmd.out_matrix {
        fs::write(path, matrix.to_tsv()).map_err(Error::from)?;
    }

    if cmd.by_video {
        let votes = majority_vote(&frame_votes);
        let mut truth: BTreeMap<String, usize> = BTreeMap::new();
        for sample in &manifest.samples {
            let label = manifest
                .label_index(&sample.label)
                .expect("label in classes");
            if let Some(prev) = truth.insert(sample.video_id.clone(), label) {
                if prev != label {
                    return Err(CliError::Core(Error::Data(format!(
                        "video {:?} appears with two labels in the manifest",
                        sample.video_id
                    ))));
                }
            }
        }
        let video_acc = video_accuracy(&votes, &truth)?;
        println!(
            "video accuracy: {:.4} ({:.2}%)",
            video_acc,
            video_acc * 100.0
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Args)]
struct SweepCmd {
    /// Fully connected layer whose size is being searched.
    #[arg(long)]
    layer: usize,
    /// Three starting sizes, comma separated.
    #[arg(long)]
    initial: String,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = SWEEP_GRANULARITY)]
    granularity: usize,
    /// Stubbed size=accuracy pairs; skips the real pipeline.
    #[arg(long)]
    stub_scores: Option<String>,

    // Real-driver inputs, required when no stub is given.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    taps: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pre: PreprocessArgs,
    #[command(flatten)]
    classifier: SweepClassifierArgs,
    /// Directory for per-size intermediate files.
    #[arg(long)]
    workdir: Option<PathBuf>,
}

// Same knobs as ClassifierArgs but with `algo` optional so the stub path
// does not demand it.
#[derive(Args)]
struct SweepClassifierArgs {
    #[arg(long, value_enum)]
    algo: Option<Algo>,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 2)]
    exponent: u32,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    max_depth: usize,
    #[arg(long, default_value_t = 2)]
    min_leaf: usize,
}

fn parse_initial_sizes(text: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(usage(format!(
            "--initial needs exactly 3 sizes, got {}",
            parts.len()
        )));
    }
    let mut sizes = [0usize; 3];
    for (slot, part) in sizes.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("invalid size {part:?}")))?;
    }
    if sizes[0] == sizes[1] || sizes[1] == sizes[2] || sizes[0] == sizes[2] {
        return Err(usage("--initial sizes must be distinct"));
    }
    Ok(sizes)
}

fn parse_stub_scores(text: &str) -> CliResult<BTreeMap<usize, f64>> {
    let mut scores = BTreeMap::new();
    for part in text.split(',') {
        let part = part.trim();
        let (size, acc) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("stub entry {part:?} must be size=accuracy")))?;
        let size: usize = size
            .trim()
            .parse()
            .map_err(|_| usage(format!("invalid stub size {part:?}")))?;
        let acc: f64 = acc
            .trim()
            .parse()
            .map_err(|_| usage(format!("invalid stub accuracy {part:?}")))?;
        scores.insert(size, acc);
    }
    Ok(scores)
}

fn run_sweep(cmd: SweepCmd) -> CliResult<()> {
    let initial = parse_initial_sizes(&cmd.initial)?;
    echo_config(&[
        ("layer", cmd.layer.to_string()),
        (
            "initial",
            format!("{},{},{}", initial[0], initial[1], initial[2]),
        ),
        ("rounds", cmd.rounds.to_string()),
        ("granularity", cmd.granularity.to_string()),
        ("seed", cmd.seed.to_string()),
        (
            "mode",
            if cmd.stub_scores.is_some() {
                "stub".to_string()
            } else {
                "pipeline".to_string()
            },
        ),
    ]);

    let outcome = if let Some(stub) = &cmd.stub_scores {
        let scores = parse_stub_scores(stub)?;
        sweep_layer_size(
            |size| {
                scores
                    .get(&size)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("no stub score for size {size}")))
            },
            initial,
            cmd.rounds,
            cmd.granularity,
        )?
    } else {
        let spec = load_arch(&cmd.arch)?;
        if !spec.fc_indices().contains(&cmd.layer) {
            return Err(usage(format!(
                "--layer {} is not a fully connected layer",
                cmd.layer
            )));
        }
        let weights = cmd
            .weights
            .clone()
            .ok_or_else(|| usage("--weights is required"))?;
        let train_manifest_path = cmd
            .train_manifest
            .clone()
            .ok_or_else(|| usage("--train-manifest is required"))?;
        let test_manifest_path = cmd
            .test_manifest
            .clone()
            .ok_or_else(|| usage("--test-manifest is required"))?;
        let classes = cmd.classes.ok_or_else(|| usage("--classes is required"))?;
        let algo = cmd
            .classifier
            .algo
            .ok_or_else(|| usage("--algo is required"))?;
        let workdir = cmd
            .workdir
            .clone()
            .ok_or_else(|| usage("--workdir is required"))?;
        let classifier = ClassifierArgs {
            algo,
            c: cmd.classifier.c,
            exponent: cmd.classifier.exponent,
            k: cmd.classifier.k,
            max_depth: cmd.classifier.max_depth,
            min_leaf: cmd.classifier.min_leaf,
        };
        let pre = cmd.pre.resolve(&spec)?;
        let base = load_weights(&spec, &weights)?;
        let train_manifest = load_manifest(&train_manifest_path)?;
        let test_manifest = load_manifest(&test_manifest_path)?;
        if train_manifest.classes != test_manifest.classes {
            return Err(CliError::Core(Error::Data(
                "train and test manifests disagree on classes".into(),
            )));
        }
        if train_manifest.classes.len() != classes {
            return Err(CliError::Core(Error::Data(format!(
                "manifest has {} classes but --classes says {classes}",
                train_manifest.classes.len()
            ))));
        }
        fs::create_dir_all(&workdir).map_err(Error::from)?;

        let evaluate = |size: usize| -> Result<f64, Error> {
            eprintln!("sweep: evaluating layer {} = {size}", cmd.layer);
            let size_dir = workdir.join(format!("size-{size}"));
            fs::create_dir_all(&size_dir)?;
            let head: BTreeMap<usize, usize> = [(cmd.layer, size)].into();
            let net = replace_head(&base, &head, classes, &mut rng::stream(cmd.seed, "init"))?;
            let cfg = FinetuneConfig {
                learning_rate: cmd.lr,
                iterations: cmd.iters,
                batch_size: cmd.batch,
                trainable: BTreeSet::new(),
                seed: cmd.seed,
                log_stride: 0,
            };
            let (trained, _) = train_head(&net, &train_manifest, &pre, &cfg)?;
            save_weights(&trained, &size_dir.join("weights.bin"))?;
            fs::write(size_dir.join("arch.cfg"), print_arch(trained.spec()))?;
            let taps = match &cmd.taps {
                Some(text) => parse_taps(text).map_err(|e| match e {
                    CliError::Usage(msg) => Error::Config(msg),
                    CliError::Core(err) => err,
                })?,
                None => trained.spec().taps.clone(),
            };
            let train_feats =
                extract_features(&trained, &train_manifest, &taps, &pre).map_err(unwrap_core)?;
            let test_feats =
                extract_features(&trained, &test_manifest, &taps, &pre).map_err(unwrap_core)?;
            train_feats.save(&size_dir.join("train.feat"))?;
            test_feats.save(&size_dir.join("test.feat"))?;
            let preds = classifier
                .predict_all(&train_feats, &test_feats)
                .map_err(unwrap_core)?;
            let truth: Vec<usize> = test_feats.records.iter().map(|r| r.label).collect();
            confusion(&preds, &truth, &test_feats.classes)?.accuracy()
        };
        sweep_layer_size(evaluate, initial, cmd.rounds, cmd.granularity)?
    };

    println!("layer_size\taccuracy");
    for (size, acc) in &outcome.trace {
        println!("{size}\t{acc:.4}");
    }
    println!("winner: {}", outcome.best);
    Ok(())
}

fn unwrap_core(e: CliError) -> Error {
    match e {
        CliError::Core(err) => err,
        CliError::Usage(msg) => Error::Config(msg),
    }
}
