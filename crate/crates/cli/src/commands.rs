use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fbr_core::dataio::{load_cifar10, load_mnist_idx, normalize, subset, LabeledDataset, NormStats};
use fbr_core::filterbank::{
    build_gabor_bank, build_lm_bank, default_gabor_frequencies, load_bank, merge_banks, render_bank_grid, save_bank,
};
use fbr_core::nn::{Network, NetworkSpec};
use fbr_core::render::render_grid;
use fbr_core::trainer::{
    digest_warning, evaluate, format_g9, load_checkpoint, parse_metrics_csv, save_checkpoint, write_metrics_csv,
    Checkpoint, Trainer,
};
use fbr_core::{FilterBank, Tensor};

use crate::config::{BankRecipe, DatasetKind, ExperimentConfig};

pub struct BankArgs {
    pub recipe: BankRecipe,
    pub orientations: usize,
    pub frequencies: usize,
    pub size: usize,
    pub external: Option<PathBuf>,
}

pub fn build_bank(args: &BankArgs) -> Result<FilterBank> {
    let (w, h) = (args.size, args.size);
    let gabor = || build_gabor_bank(args.orientations, &default_gabor_frequencies(args.frequencies), w, h);
    Ok(match args.recipe {
        BankRecipe::Gabor => gabor()?,
        BankRecipe::Lm => build_lm_bank(w, h)?,
        BankRecipe::Union => merge_banks(&gabor()?, &build_lm_bank(w, h)?)?,
        BankRecipe::External => {
            let path = args.external.as_ref().ok_or_else(|| anyhow!("external bank needs a path"))?;
            load_bank(path).with_context(|| format!("loading bank {}", path.display()))?
        }
        BankRecipe::None => bail!("no bank recipe given"),
    })
}

pub fn cmd_bank(args: &BankArgs, out: &Path, render: Option<&Path>) -> Result<()> {
    let bank = build_bank(args)?;
    save_bank(&bank, out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = render {
        render_bank_grid(&bank, p).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{} filters of {}x{} -> {}", bank.len(), bank.width(), bank.height(), out.display());
    Ok(())
}

pub fn cmd_bank_info(path: &Path) -> Result<()> {
    let bank = load_bank(path).with_context(|| format!("loading {}", path.display()))?;
    println!("filters: {}", bank.len());
    println!("size: {}x{}", bank.width(), bank.height());
    for (family, count) in bank.family_counts() {
        println!("{}: {count}", family.name());
    }
    Ok(())
}

pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub stats: NormStats,
}

/// Loads, subsamples and normalizes both splits as the config describes.
pub fn load_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let (train, test) = match config.dataset {
        DatasetKind::Mnist => (
            load_mnist_idx(&config.train_images, &config.train_labels)
                .with_context(|| format!("loading {}", config.train_images))?,
            load_mnist_idx(&config.test_images, &config.test_labels)
                .with_context(|| format!("loading {}", config.test_images))?,
        ),
        DatasetKind::Cifar10 => (
            load_cifar10(config.cifar_train.as_slice()).context("loading CIFAR-10 training batches")?,
            load_cifar10(&[&config.cifar_test]).with_context(|| format!("loading {}", config.cifar_test))?,
        ),
    };
    let train = if config.train_per_class > 0 {
        subset(&train, config.train_per_class, config.subset_seed)?
    } else {
        train
    };
    let (train, stats) = normalize(&train, config.norm.as_ref())?;
    let (test, _) = normalize(&test, Some(&stats))?;
    Ok(Datasets { train, test, stats })
}

/// Bank for a run, built at `bank_size` or at the largest regularized kernel.
pub fn run_bank(config: &ExperimentConfig, network: &Network) -> Result<Option<FilterBank>> {
    if config.bank == BankRecipe::None {
        return Ok(None);
    }
    let size = if config.bank_size > 0 {
        config.bank_size
    } else {
        network
            .conv_layers()
            .filter(|(_, c)| config.train.reg.selects(c))
            .map(|(_, c)| c.kernel_height().max(c.kernel_width()))
            .max()
            .ok_or_else(|| anyhow!("bank_size = 0 needs at least one regularized layer"))?
    };
    let args = BankArgs {
        recipe: config.bank,
        orientations: config.gabor_orientations,
        frequencies: config.gabor_frequencies,
        size,
        external: Some(PathBuf::from(&config.bank_path)).filter(|p| !p.as_os_str().is_empty()),
    };
    build_bank(&args).map(Some)
}

fn write_log(dir: &Path, trainer: &Trainer) -> Result<()> {
    let file = fs::File::create(dir.join("metrics.csv"))?;
    write_metrics_csv(trainer.log(), std::io::BufWriter::new(file))?;
    Ok(())
}

pub fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<()> {
    let mut config = ExperimentConfig::load(config_path)?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got '{o}'"))?;
        config.set(k.trim(), v).with_context(|| format!("--set {o}"))?;
    }
    config.train.validate()?;
    let spec = NetworkSpec::named(&config.train.spec)?;
    let data = load_datasets(&config)?;
    config.norm = Some(data.stats.clone());
    let network = Network::init(&spec, config.train.seed)?;
    let bank = run_bank(&config, &network)?;

    let dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.resolved"), config.resolved())?;

    let mut trainer = Trainer::new(config.train.clone(), network, bank.as_ref(), &data.train, Some(&data.test))?;
    save_checkpoint(&trainer.checkpoint(), dir.join("init.fbck"))?;
    let outcome = trainer.run();
    write_log(&dir, &trainer)?;
    outcome?;
    save_checkpoint(&trainer.checkpoint(), dir.join("final.fbck"))?;
    if let Some((_, best)) = trainer.best() {
        let ckpt = Checkpoint {
            network: best.clone(),
            ..trainer.checkpoint()
        };
        save_checkpoint(&ckpt, dir.join("best.fbck"))?;
    }
    if let Some(last) = trainer.log().last() {
        println!(
            "epoch {} iteration {}: test_ce {} test_acc {}",
            last.epoch,
            last.iteration,
            last.test_ce.map(format_g9).unwrap_or_default(),
            last.test_accuracy.map(format_g9).unwrap_or_default()
        );
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn load_checked(checkpoint: &Path, config: &ExperimentConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if let Some(w) = digest_warning(&ckpt, &config.train) {
        eprintln!("warning: {w}");
    }
    Ok(ckpt)
}

pub fn cmd_eval(checkpoint: &Path, config_path: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let ckpt = load_checked(checkpoint, &config)?;
    let data = load_datasets(&config)?;
    let (ce, acc) = evaluate(&ckpt.network, &data.test)?;
    println!("test_ce={} test_acc={}", format_g9(ce), format_g9(acc));
    println!("checkpoint,test_ce,test_acc");
    println!("{},{},{}", checkpoint.display(), format_g9(ce), format_g9(acc));
    Ok(())
}

pub fn cmd_export_kernels(checkpoint: &Path, layer: usize, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let conv = ckpt
        .network
        .conv_layer(layer)
        .ok_or_else(|| anyhow!("layer {layer} is not a convolution layer"))?;
    let (h, w) = (conv.kernel_height(), conv.kernel_width());
    let tiles: Vec<&[f64]> = conv.kernels.data().chunks_exact(h * w).collect();
    render_grid(&tiles, w, h).save_pgm(out)?;
    println!("{} kernel slices -> {}", tiles.len(), out.display());
    Ok(())
}

pub fn cmd_export_features(
    checkpoint: &Path,
    config_path: &Path,
    image: usize,
    layers: &[usize],
    out_dir: &Path,
) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let ckpt = load_checked(checkpoint, &config)?;
    let data = load_datasets(&config)?;
    if image >= data.test.len() {
        bail!("image index {image} outside the {} test images", data.test.len());
    }
    let depth = ckpt.network.layers().len();
    if let Some(&bad) = layers.iter().find(|&&l| l >= depth) {
        bail!("layer {bad} outside the network's {depth} layers");
    }
    let x = data.test.images.select(&[image]);
    let acts = ckpt.network.activations(&x)?;
    fs::create_dir_all(out_dir)?;
    for &l in layers {
        let a: &Tensor = &acts[l];
        let s = a.shape();
        if s.len() != 4 {
            bail!("layer {l} output {s:?} has no spatial maps");
        }
        let tiles: Vec<&[f64]> = a.data().chunks_exact(s[2] * s[3]).collect();
        let path = out_dir.join(format!("layer{l}.pgm"));
        render_grid(&tiles, s[3], s[2]).save_pgm(&path)?;
        println!("{} maps of layer {l} -> {}", tiles.len(), path.display());
    }
    Ok(())
}

struct CompareRow {
    reg_type: String,
    gamma: f64,
    lambda: f64,
    l1: f64,
    l2: f64,
    acc: f64,
    ce: f64,
}

fn compare_row(dir: &Path) -> Result<CompareRow> {
    let config = ExperimentConfig::load(&dir.join("config.resolved"))?;
    let text = fs::read_to_string(dir.join("metrics.csv")).context("reading metrics.csv")?;
    let last = parse_metrics_csv(&text)?
        .pop()
        .ok_or_else(|| anyhow!("metrics.csv has no rows"))?;
    let (ce, acc) = last
        .test_ce
        .zip(last.test_accuracy)
        .ok_or_else(|| anyhow!("last metrics row has no test columns"))?;
    let reg = &config.train.reg;
    let mut kinds = Vec::new();
    if reg.lambda_fbr > 0.0 {
        kinds.push("fbr".to_string());
    }
    if reg.gamma_ortho > 0.0 {
        kinds.push(reg.ortho_variant.name().to_string());
    }
    if reg.l1_coeff > 0.0 {
        kinds.push("l1".into());
    }
    if reg.l2_coeff > 0.0 {
        kinds.push("l2".into());
    }
    Ok(CompareRow {
        reg_type: if kinds.is_empty() { "baseline".into() } else { kinds.join("+") },
        gamma: reg.gamma_ortho,
        lambda: reg.lambda_fbr,
        l1: reg.l1_coeff,
        l2: reg.l2_coeff,
        acc,
        ce,
    })
}

pub fn cmd_compare(dirs: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for d in dirs {
        match compare_row(d) {
            Ok(r) => rows.push(r),
            Err(e) => eprintln!("warning: skipping {}: {e:#}", d.display()),
        }
    }
    rows.sort_by(|a, b| a.ce.total_cmp(&b.ce));
    let mut table = String::from("reg_type,gamma,lambda,l1,l2,acc,ce\n");
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.reg_type,
            format_g9(r.gamma),
            format_g9(r.lambda),
            format_g9(r.l1),
            format_g9(r.l2),
            format_g9(r.acc),
            format_g9(r.ce)
        ));
    }
    println!("{:<16} {:>10} {:>10} {:>10} {:>10} {:>9} {:>10}", "Reg. type", "gamma", "lambda", "L1", "L2", "Acc. (%)", "CE loss");
    for r in &rows {
        println!(
            "{:<16} {:>10} {:>10} {:>10} {:>10} {:>9.2} {:>10.4}",
            r.reg_type,
            format_g9(r.gamma),
            format_g9(r.lambda),
            format_g9(r.l1),
            format_g9(r.l2),
            100.0 * r.acc,
            r.ce
        );
    }
    match csv {
        Some(p) => fs::write(p, table).with_context(|| format!("writing {}", p.display()))?,
        None => print!("\n{table}"),
    }
    Ok(())
}
