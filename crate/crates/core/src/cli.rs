//! The `styledomain` command line.
//!
//! Every subcommand is a thin wrapper over library calls; [`run`] writes
//! its report to the given sink so it can be driven from tests.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::apps::{render_morph, MorphAssets, MorphPlan};
use crate::arch::{sample_latent, ArchitectureDescriptor, GeneratorWeights, SamplerConfig};
use crate::checkpoint;
use crate::directions::{mix, StyleDomainDirection};
use crate::image_io::{content_hash, encode_png, load_png};
use crate::losses::{BackendRegistry, EVAL_BACKEND};
use crate::metrics::{evaluate, EvalProtocol, EvalReference, Metric, EVAL_IMAGES, EVAL_REPEATS};
use crate::paramspace::{human_count, size_table, ParamSpaceKind};
use crate::recipe::{AdaptRecipe, ImageRef, ObjectiveSpec};
use crate::service::{generate_images, grid_png};
use crate::trainer::Regime;

#[derive(Debug, Parser)]
#[command(name = "styledomain", version, about = "Generator domain adaptation in restricted parameter spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print trainable-parameter counts of every parameter space.
    Spaces {
        #[arg(long, default_value = "sg2-512")]
        arch: String,
        /// Resolution of the block trained by the `+` kinds.
        #[arg(long, default_value_t = 64)]
        block: usize,
        #[arg(long)]
        json: bool,
    },
    /// Write a randomly initialized generator checkpoint.
    Init {
        #[arg(long, default_value = "toy32")]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Direction algebra and rendering.
    #[command(subcommand)]
    Dir(DirCommand),
    /// Adapt a generator and save the resulting direction or checkpoint.
    Adapt(AdaptArgs),
    /// Render a morph plan to a PNG frame sequence.
    Morph {
        #[arg(long)]
        plan: PathBuf,
        /// Extra generator assets as `name=path`; a bare path is named after its file stem.
        #[arg(long = "gen")]
        gens: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        psi: f64,
    },
    /// Evaluate a generator (optionally shifted by a direction) and print a JSON report.
    Eval {
        #[arg(long)]
        metric: Metric,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Target description for `quality`; defaults to the direction's label.
        #[arg(long)]
        target: Option<String>,
        /// Real images for `fid` and `kid`.
        #[arg(long = "real")]
        real: Vec<PathBuf>,
        #[arg(long, default_value_t = EVAL_IMAGES)]
        n: usize,
        #[arg(long, default_value_t = EVAL_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        psi: f64,
        #[arg(long, default_value = EVAL_BACKEND)]
        backend: String,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        registry_dir: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DirCommand {
    /// Linear combination of directions: `--in a.sdir:0.6 --in b.sdir:0.4`.
    Mix {
        #[arg(long = "in", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<String>,
    },
    /// Render seeds with a direction applied.
    Apply {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
        /// `0..15` (inclusive), `3`, or a comma list of either.
        #[arg(long, default_value = "0..15")]
        seeds: String,
        #[arg(long, default_value_t = 1.0)]
        psi: f64,
        /// Write all seeds as one grid PNG.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Write one `seed_<n>.png` per seed into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub gen: PathBuf,
    /// Recipe file; replaces the objective flags below.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    #[arg(long, default_value = "stylespace")]
    pub space: ParamSpaceKind,
    /// `text`, `one_shot`, `mean_color` or `adversarial`.
    #[arg(long, default_value = "text")]
    pub loss: String,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value = "photo")]
    pub source: String,
    /// Reference image for `one_shot`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// `r,g,b` channel means for `mean_color`.
    #[arg(long)]
    pub color: Option<String>,
    /// Training images for `adversarial`.
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    #[arg(long = "preset", default_value = "similar_text")]
    pub regime: Regime,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `0..15` (inclusive), `7` or comma lists of those.
pub fn parse_seeds(spec: &str) -> anyhow::Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let a: u64 = a.parse().with_context(|| format!("bad seed range '{part}'"))?;
                let b: u64 = b
                    .trim_start_matches('=')
                    .parse()
                    .with_context(|| format!("bad seed range '{part}'"))?;
                if b < a {
                    bail!("empty seed range '{part}'");
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().with_context(|| format!("bad seed '{part}'"))?),
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

/// Parses `path:coeff`; the coefficient defaults to 1.
fn parse_weighted(input: &str) -> anyhow::Result<(PathBuf, f64)> {
    if let Some((path, coeff)) = input.rsplit_once(':') {
        if let Ok(c) = coeff.parse::<f64>() {
            return Ok((PathBuf::from(path), c));
        }
    }
    Ok((PathBuf::from(input), 1.0))
}

fn parse_color(s: &str) -> anyhow::Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad colour '{s}'"))?;
    v.try_into().map_err(|_| anyhow::anyhow!("colour needs three components"))
}

/// Plan file of the `morph` command: a [`MorphPlan`] plus asset paths
/// relative to the plan file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MorphPlanFile {
    #[serde(flatten)]
    pub plan: MorphPlan,
    #[serde(default)]
    pub generators: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub directions: BTreeMap<String, PathBuf>,
}

/// Reproducibility snapshot written next to an `adapt` output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub recipe: AdaptRecipe,
    pub hyperparams: crate::trainer::Hyperparams,
    pub parent: PathBuf,
    pub parent_fingerprint: String,
    pub parent_hash: String,
    pub output: PathBuf,
    pub output_hash: String,
    pub final_loss: Option<f64>,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

impl AdaptArgs {
    fn recipe(&self) -> anyhow::Result<AdaptRecipe> {
        if let Some(path) = &self.recipe {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(serde_json::from_str(&text)?);
        }
        let objective = match self.loss.as_str() {
            "text" => ObjectiveSpec::Text {
                target_text: self.target.clone().context("--target is required for the text loss")?,
                source_text: self.source.clone(),
            },
            "one_shot" => ObjectiveSpec::OneShot {
                reference: ImageRef::Path {
                    path: self.reference.clone().context("--reference is required for the one-shot loss")?,
                },
            },
            "mean_color" => ObjectiveSpec::MeanColor {
                target: parse_color(self.color.as_deref().context("--color is required for mean_color")?)?,
            },
            "adversarial" => {
                if self.images.is_empty() {
                    bail!("--image is required for the adversarial loss");
                }
                ObjectiveSpec::Adversarial {
                    images: self.images.iter().map(|p| ImageRef::Path { path: p.clone() }).collect(),
                }
            }
            other => bail!("unknown loss '{other}'"),
        };
        Ok(AdaptRecipe {
            kind: self.space,
            regime: self.regime,
            objective,
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed: self.seed,
            label: self.label.clone(),
            backend: None,
        })
    }
}

fn adapt(args: &AdaptArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let parent = checkpoint::load(&args.gen).with_context(|| format!("loading {}", args.gen.display()))?;
    let recipe = args.recipe()?;
    // Relative image paths in a recipe file resolve against its directory.
    let base = args
        .recipe
        .as_ref()
        .and_then(|p| p.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let result = recipe.run(&parent, &BackendRegistry::with_stubs(), &base, |done, total| {
        if done % 50 == 0 || done == total {
            log::info!("iteration {done}/{total}");
        }
        true
    })?;
    let bytes = match &result.direction {
        Some(dir) => dir.to_bytes()?,
        None => checkpoint::to_bytes(&result.child(&parent)?)?,
    };
    std::fs::write(&args.out, &bytes)?;
    let manifest = RunManifest {
        hyperparams: result.hyperparams.clone(),
        recipe,
        parent: args.gen.clone(),
        parent_fingerprint: result.parent_fingerprint.clone(),
        parent_hash: result.parent_hash.clone(),
        output: args.out.clone(),
        output_hash: content_hash(&bytes),
        final_loss: result.loss_trace.last().copied(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path(&args.out), &text)?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn load_dir(path: &Path, desc: &ArchitectureDescriptor) -> anyhow::Result<StyleDomainDirection> {
    StyleDomainDirection::load_for(path, desc).with_context(|| format!("loading {}", path.display()))
}

fn dir_command(cmd: &DirCommand, out: &mut dyn Write) -> anyhow::Result<()> {
    match cmd {
        DirCommand::Mix { inputs, out: path, label } => {
            let loaded = inputs
                .iter()
                .map(|i| {
                    let (p, c) = parse_weighted(i)?;
                    let d = StyleDomainDirection::load(&p).with_context(|| format!("loading {}", p.display()))?;
                    Ok((d, c))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let terms: Vec<_> = loaded.iter().map(|(d, c)| (d, *c)).collect();
            let mut mixed = mix(&terms)?;
            if let Some(l) = label {
                mixed.domain_label = l.clone();
            }
            mixed.save(path)?;
            writeln!(out, "{}", json!({ "out": path, "payload_hash": mixed.payload_hash() }))?;
        }
        DirCommand::Apply {
            gen,
            dir,
            strength,
            seeds,
            psi,
            grid,
            out_dir,
        } => {
            let weights = checkpoint::load(gen).with_context(|| format!("loading {}", gen.display()))?;
            let d = dir.as_ref().map(|p| load_dir(p, weights.descriptor())).transpose()?;
            let seeds = parse_seeds(seeds)?;
            let images = generate_images(&weights, d.as_ref(), &seeds, *strength, *psi)?;
            if grid.is_none() && out_dir.is_none() {
                bail!("give --grid and/or --out-dir");
            }
            let mut report = serde_json::Map::new();
            if let Some(path) = grid {
                let png = grid_png(&images)?;
                std::fs::write(path, &png)?;
                report.insert("grid_hash".into(), json!(content_hash(&png)));
            }
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                let mut hashes = Vec::new();
                for (seed, img) in seeds.iter().zip(&images) {
                    let png = encode_png(img)?;
                    std::fs::write(dir.join(format!("seed_{seed}.png")), &png)?;
                    hashes.push(json!({ "seed": seed, "content_hash": content_hash(&png) }));
                }
                report.insert("images".into(), json!(hashes));
            }
            writeln!(out, "{}", serde_json::Value::Object(report))?;
        }
    }
    Ok(())
}

fn morph(
    plan_path: &Path,
    gens: &[String],
    out_dir: &Path,
    seed: u64,
    psi: f64,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(plan_path).with_context(|| format!("reading {}", plan_path.display()))?;
    let file: MorphPlanFile = serde_json::from_str(&text)?;
    let base = plan_path.parent().unwrap_or(Path::new(""));
    let mut assets = MorphAssets::default();
    for (name, p) in &file.generators {
        assets.generators.insert(name.clone(), checkpoint::load(base.join(p))?);
    }
    for g in gens {
        let (name, p) = match g.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(g);
                let stem = p.file_stem().context("generator path has no file name")?;
                (stem.to_string_lossy().into_owned(), p)
            }
        };
        assets.generators.insert(name, checkpoint::load(&p)?);
    }
    for (name, p) in &file.directions {
        assets.directions.insert(name.clone(), StyleDomainDirection::load(base.join(p))?);
    }
    let dim = assets
        .generators
        .values()
        .next()
        .map(|g| g.descriptor().latent_dim)
        .context("the plan names no generators")?;
    let frames = render_morph(&file.plan, &assets, &sample_latent(seed, dim), &SamplerConfig::with_psi(psi))?;
    std::fs::create_dir_all(out_dir)?;
    let mut index = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let png = encode_png(&f.image)?;
        let name = format!("frame_{i:05}.png");
        std::fs::write(out_dir.join(&name), &png)?;
        index.push(json!({ "file": name, "stage": f.stage, "t": f.t, "content_hash": content_hash(&png) }));
    }
    let index = json!({ "seed": seed, "psi": psi, "frames": index });
    std::fs::write(out_dir.join("frames.json"), serde_json::to_string_pretty(&index)?)?;
    writeln!(out, "{}", json!({ "frames": frames.len(), "out": out_dir }))?;
    Ok(())
}

/// Executes one parsed command line.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Spaces { arch, block, json } => {
            let desc = ArchitectureDescriptor::preset(&arch)?;
            let rows = size_table(&desc, block)?;
            if json {
                let rows: Vec<_> = rows
                    .iter()
                    .map(|(k, n)| json!({ "kind": k.to_string(), "params": n, "size": human_count(*n) }))
                    .collect();
                writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?;
            } else {
                writeln!(out, "{:<16} {:>12} {:>8}", "space", "params", "size")?;
                for (k, n) in rows {
                    writeln!(out, "{:<16} {:>12} {:>8}", k.to_string(), n, human_count(n))?;
                }
            }
        }
        Command::Init { arch, seed, out: path } => {
            let desc = ArchitectureDescriptor::preset(&arch)?;
            let w = GeneratorWeights::random(&desc, seed)?;
            checkpoint::save(&w, &path)?;
            writeln!(out, "{}", json!({ "out": path, "fingerprint": w.fingerprint() }))?;
        }
        Command::Dir(cmd) => dir_command(&cmd, out)?,
        Command::Adapt(args) => adapt(&args, out)?,
        Command::Morph {
            plan,
            gens,
            out: dir,
            seed,
            psi,
        } => morph(&plan, &gens, &dir, seed, psi, out)?,
        Command::Eval {
            metric,
            gen,
            dir,
            target,
            real,
            n,
            repeats,
            seed,
            psi,
            backend,
        } => {
            let weights = checkpoint::load(&gen).with_context(|| format!("loading {}", gen.display()))?;
            let d = dir.as_ref().map(|p| load_dir(p, weights.descriptor())).transpose()?;
            let backend = BackendRegistry::with_stubs().get(&backend)?;
            let real = real.iter().map(load_png).collect::<crate::Result<Vec<_>>>()?;
            let target = target.or_else(|| d.as_ref().map(|d| d.domain_label.clone()));
            let reference = match metric {
                Metric::Quality => EvalReference::Text(target.as_deref().context("quality needs --target")?),
                Metric::Diversity => EvalReference::None,
                Metric::Fid | Metric::Kid => {
                    if real.is_empty() {
                        bail!("{metric} needs --real images");
                    }
                    EvalReference::Images(&real)
                }
            };
            let protocol = EvalProtocol {
                n_images: n,
                repeats,
                seed,
                psi,
            };
            let report = evaluate(metric, &weights, d.as_ref(), reference, &protocol, backend.as_ref())?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Serve {
            port,
            host,
            registry_dir,
        } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad --host/--port")?;
            tokio::runtime::Runtime::new()?.block_on(crate::service::serve(addr, registry_dir))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("5, 1..=2").unwrap(), vec![5, 1, 2]);
        assert_eq!(parse_seeds("0..15").unwrap().len(), 16);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn weighted_inputs() {
        assert_eq!(parse_weighted("a.sdir:0.6").unwrap(), (PathBuf::from("a.sdir"), 0.6));
        assert_eq!(parse_weighted("a.sdir:-1").unwrap(), (PathBuf::from("a.sdir"), -1.0));
        assert_eq!(parse_weighted("a.sdir").unwrap(), (PathBuf::from("a.sdir"), 1.0));
    }

    #[test]
    fn parses_documented_invocations() {
        let cli = Cli::try_parse_from([
            "styledomain", "adapt", "--gen", "parent.ckpt", "--space", "stylespace", "--loss", "text", "--target",
            "Sketch", "--source", "Photo", "--preset", "similar_text", "--out", "sketch.sdir",
        ])
        .unwrap();
        let Command::Adapt(a) = cli.command else { panic!() };
        assert_eq!(a.space, ParamSpaceKind::StyleSpace);
        let r = a.recipe().unwrap();
        assert_eq!(r.label(), "Sketch");
        for argv in [
            &["styledomain", "spaces", "--arch", "sg2-512"][..],
            &["styledomain", "dir", "mix", "--in", "a.sdir:0.6", "--in", "b.sdir:0.4", "--out", "m.sdir"],
            &["styledomain", "dir", "apply", "--gen", "g", "--dir", "m.sdir", "--strength", "1.0", "--seeds", "0..15", "--grid", "o.png"],
            &["styledomain", "morph", "--plan", "plan.json", "--gen", "ffhq.ckpt", "--out", "frames/"],
            &["styledomain", "eval", "--metric", "quality", "--gen", "g", "--dir", "s.sdir", "--n", "1000", "--repeats", "5"],
            &["styledomain", "serve", "--port", "8080", "--registry-dir", "reg"],
        ] {
            Cli::try_parse_from(argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
    }
}
