use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vbp_core::bench::{bench, synthetic_input, BenchConfig, BenchMethod};
use vbp_core::imaging::{load_image, mask_to_image, overlay_red, save_image, to_grayscale, to_input_tensor, Image};
use vbp_core::inference::forward;
use vbp_core::lrp::{lrp_relevance, LrpConfig, DEFAULT_EPSILON};
use vbp_core::manifest::{load_model, save_model};
use vbp_core::oracle::{oracle_check, OracleCheckConfig};
use vbp_core::preset::{preset, PresetName};
use vbp_core::similarity::compare_masks;
use vbp_core::visualbackprop::visualbackprop;
use vbp_core::{Model, SaliencyMask, Tensor};

#[derive(Parser)]
#[command(name = "vbp", version, about = "CNN saliency masks: VisualBackProp, LRP and a flow oracle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the model on an image and print one output per line.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Write a saliency mask (P5) and optionally a red overlay (P6).
    Visualize {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Vbp)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[command(flatten)]
        lrp: LrpArgs,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Compare VisualBackProp and LRP masks for one image.
    Compare {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        lrp: LrpArgs,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Time mask computation on a deterministic synthetic input.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "vbp")]
        method: BenchMethod,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        runs: u64,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Worker threads; defaults to the machine's parallelism.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 0)]
        input_seed: u64,
        #[command(flatten)]
        lrp: LrpArgs,
    },
    /// Check VisualBackProp against the flow oracle on random small networks.
    OracleCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [6, 6])]
        max_size: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Write a preset model as a manifest plus weight blob.
    Preset {
        name: PresetName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manifest path; the weight blob is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Vbp,
    Lrp,
}

#[derive(Args)]
struct ModelArgs {
    /// Model manifest (JSON) with its weight blob alongside.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Built-in architecture with deterministic weights.
    #[arg(long)]
    preset: Option<PresetName>,
    /// Weight seed for --preset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LrpArgs {
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Output neuron to explain; defaults to the argmax.
    #[arg(long)]
    output_index: Option<usize>,
}

impl LrpArgs {
    fn config(&self) -> LrpConfig {
        LrpConfig {
            epsilon: self.epsilon,
            output_index: self.output_index,
        }
    }
}

impl ModelArgs {
    fn load(&self) -> Result<(Model, String)> {
        match (&self.model, self.preset) {
            (Some(path), _) => {
                let m = load_model(path).with_context(|| format!("loading {}", path.display()))?;
                Ok((m, path.display().to_string()))
            }
            (None, Some(name)) => Ok((preset(name, self.seed)?, name.to_string())),
            (None, None) => bail!("either --model or --preset is required"),
        }
    }
}

fn load_input(model: &Model, path: &Path) -> Result<(Image, Tensor)> {
    let img = load_image(path)?;
    let x: Tensor = to_input_tensor(&img)?;
    let want = model.input_shape();
    if x.shape() != want {
        bail!(
            "image {} has shape {}x{}x{}, model expects {}x{}x{}",
            path.display(),
            img.channels,
            img.height,
            img.width,
            want[0],
            want[1],
            want[2]
        );
    }
    Ok((img, x))
}

fn mask_f64(mask: &SaliencyMask) -> Vec<f64> {
    mask.values.data().iter().map(|&v| v as f64).collect()
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        bail!("--threads must be at least 1");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Infer {
            model,
            image,
            threads,
        } => {
            let (m, _) = model.load()?;
            let (_, x) = load_input(&m, &image)?;
            let out = pool(threads)?.install(|| forward(&m, &x))?;
            for v in out.output {
                println!("{v:.6}");
            }
        }
        Command::Visualize {
            model,
            image,
            method,
            out,
            overlay,
            lrp,
            threads,
        } => {
            let (m, _) = model.load()?;
            let (img, x) = load_input(&m, &image)?;
            let (mask, output_index) = pool(threads)?.install(|| -> Result<_> {
                Ok(match method {
                    Method::Vbp => (visualbackprop(&m, &x, false)?, None),
                    Method::Lrp => {
                        let r = lrp_relevance(&m, &x, &lrp.config())?;
                        (r.mask, Some(r.output_index))
                    }
                })
            })?;
            save_image(&mask_to_image(&mask.values)?, &out)?;
            if let Some(path) = &overlay {
                save_image(&overlay_red(&to_grayscale(&img), &mask.values)?, path)?;
            }
            print_json(&json!({
                "method": if method == Method::Vbp { "vbp" } else { "lrp" },
                "mask": out,
                "overlay": overlay,
                "width": img.width,
                "height": img.height,
                "output_index": output_index,
            }))?;
        }
        Command::Compare {
            model,
            image,
            lrp,
            threads,
        } => {
            let (m, _) = model.load()?;
            let (_, x) = load_input(&m, &image)?;
            let (vbp, rel) = pool(threads)?.install(|| -> Result<_> {
                Ok((visualbackprop(&m, &x, false)?, lrp_relevance(&m, &x, &lrp.config())?))
            })?;
            let sim = compare_masks(&mask_f64(&vbp), &mask_f64(&rel.mask))?;
            print_json(&json!({
                "pearson": sim.pearson,
                "spearman": sim.spearman,
                "top5_jaccard": sim.top5_jaccard,
                "top_k": sim.top_k,
                "pixels": sim.pixels,
                "lrp_output_index": rel.output_index,
                "epsilon": lrp.epsilon,
            }))?;
        }
        Command::Bench {
            model,
            method,
            runs,
            warmup,
            threads,
            input_seed,
            lrp,
        } => {
            let (m, name) = model.load()?;
            let x = synthetic_input(m.input_shape(), input_seed)?;
            let threads = threads.unwrap_or_else(|| {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            });
            let cfg = BenchConfig {
                method,
                runs: runs as usize,
                warmup,
                lrp: lrp.config(),
            };
            let report = pool(threads)?.install(|| bench(&m, &name, &x, &cfg))?;
            print_json(&report)?;
        }
        Command::OracleCheck {
            seed,
            trials,
            max_size,
            threads,
        } => {
            let cfg = OracleCheckConfig {
                seed,
                trials,
                max_h: max_size[0],
                max_w: max_size[1],
            };
            let report = pool(threads)?.install(|| oracle_check(&cfg))?;
            print_json(&report)?;
            if !report.all_passed() {
                eprintln!("oracle check: {} of {} trials failed", report.failed, report.trials);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Preset { name, seed, out } => {
            let m = preset(name, seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            save_model(&m, &out)?;
            print_json(&json!({
                "preset": name.to_string(),
                "seed": seed,
                "manifest": out,
                "input_shape": m.input_shape(),
                "layers": m.layers().len(),
                "conv_stages": m.conv_count(),
                "parameters": m.parameter_count(),
            }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
