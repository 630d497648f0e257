use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdtsde::energy::{reference_instance, verify_strict_domination, SolverOptions, DEFAULT_GRID};
use cdtsde::forward::DomainPair;
use cdtsde::io::{read_field, read_model, read_tensor, write_atomic, write_field, write_model, write_previews, write_tensor, Tensor};
use cdtsde::mixfield::{ChannelPolyParams, MixField, MixOptions, ModNetParams, DEFAULT_POLY_DEGREE};
use cdtsde::predictors::{moving_average, train_score_matching, Mixer, ToyNet, ToyPredictor, TOY_WIDTH};
use cdtsde::sampler::{sample_with_observer, SamplerConfig};
use cdtsde::schedules::NoiseSchedule;
use cdtsde::tasks::{evaluate_pairs, gen_dataset, pair_seed, SyntheticTaskSpec};
use cdtsde::verify::{run_suite, SuiteOptions};
use cdtsde::{Error, Field, Result};

use crate::config::{RunConfig, ScheduleVariant};

const MANIFEST: &str = "manifest.csv";
const LOSS_WINDOW: usize = 100;

fn load_config(path: &Path, command: &str) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = RunConfig::parse(&text)?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join(format!("{command}.resolved.cfg")), cfg.render().as_bytes())?;
    Ok(cfg)
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(cfg.steps, cfg.beta_min, cfg.beta_max).map_err(|e| Error::Config(e.to_string()))
}

fn pair_name(i: usize) -> String {
    format!("pair_{i:04}")
}

fn csv_bytes(rows: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        rows(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

pub fn dataset(config: &Path) -> Result<()> {
    let cfg = load_config(config, "dataset")?;
    let spec = SyntheticTaskSpec {
        kind: cfg.task,
        n: cfg.n_pairs,
        height: cfg.image_size,
        width: cfg.image_size,
        channels: cfg.channels,
        seed: cfg.seed,
    };
    let pairs = gen_dataset(&spec)?;
    let dir = cfg.out_dir.join("dataset");
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let name = pair_name(i);
        let src = format!("{name}_src.cdt");
        let tgt = format!("{name}_tgt.cdt");
        write_field(&dir.join(&src), &pair.x_src)?;
        write_field(&dir.join(&tgt), &pair.x_tgt)?;
        let mask = match &pair.mask {
            Some(m) => {
                let p = format!("{name}_mask.cdt");
                write_tensor(&dir.join(&p), &Tensor::from_plane(m.view()))?;
                p
            }
            None => String::new(),
        };
        rows.push([i.to_string(), src, tgt, mask, pair_seed(cfg.seed, i).to_string()]);
    }
    let bytes = csv_bytes(|w| {
        w.write_record(["index", "src_path", "tgt_path", "mask_path", "seed"])?;
        for r in &rows {
            w.write_record(r)?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join(MANIFEST), &bytes)?;
    println!("wrote {} pairs to {}", pairs.len(), dir.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<DomainPair>> {
    let manifest = dir.join(MANIFEST);
    let mut reader = csv::Reader::from_reader(fs::File::open(&manifest)?);
    let mut pairs = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::Format {
                path: manifest.clone(),
                reason: format!("row {row} has {} columns, expected 5", rec.len()),
            })
        };
        let index: usize = field(0)?.parse().map_err(|_| Error::Format {
            path: manifest.clone(),
            reason: format!("row {row}: bad index"),
        })?;
        if index != row {
            return Err(Error::Format {
                path: manifest.clone(),
                reason: format!("row {row} has index {index}"),
            });
        }
        let mut pair = DomainPair::new(read_field(&dir.join(field(1)?))?, read_field(&dir.join(field(2)?))?)?;
        let mask = field(3)?;
        if !mask.is_empty() {
            pair = pair.with_mask(read_tensor(&dir.join(mask))?.to_plane()?)?;
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::Format {
            path: manifest,
            reason: "no pairs".into(),
        });
    }
    Ok(pairs)
}

fn initial_mixer(cfg: &RunConfig, schedule: &NoiseSchedule, shape: [usize; 3]) -> Result<Mixer> {
    let opts = MixOptions::truncated(cfg.t1);
    Ok(match cfg.schedule_variant {
        ScheduleVariant::Linear => Mixer::Fixed(MixField::linear(schedule, shape, opts)?),
        ScheduleVariant::Channel => Mixer::ChannelPoly {
            params: ChannelPolyParams::identity(shape[0], DEFAULT_POLY_DEGREE)?,
            opts,
        },
        ScheduleVariant::Dynamic => Mixer::Dynamic {
            params: ModNetParams::init(shape[0], &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
            opts,
        },
    })
}

pub fn train(config: &Path, data: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, "train")?;
    let pairs = load_dataset(&data.unwrap_or_else(|| cfg.out_dir.join("dataset")))?;
    let sched = schedule(&cfg)?;
    let shape = pairs[0].shape();
    let mixer = initial_mixer(&cfg, &sched, shape)?;
    let net = ToyNet::init(cfg.seed, shape[0], TOY_WIDTH);
    let out = train_score_matching(&pairs, net, mixer, &sched, &cfg.train_config())?;
    write_model(&cfg.out_dir.join("model.cdp"), &out.net, &out.mixer, &sched)?;
    let smoothed = moving_average(&out.losses, LOSS_WINDOW);
    let bytes = csv_bytes(|w| {
        w.write_record(["step", "loss", "smoothed_loss"])?;
        for (i, (l, s)) in out.losses.iter().zip(&smoothed).enumerate() {
            w.write_record([i.to_string(), l.to_string(), s.to_string()])?;
        }
        Ok(())
    })?;
    write_atomic(&cfg.out_dir.join("loss.csv"), &bytes)?;
    println!(
        "trained {} steps; smoothed loss {:.4} -> {:.4}",
        out.losses.len(),
        smoothed[LOSS_WINDOW.min(smoothed.len()) - 1],
        smoothed[smoothed.len() - 1]
    );
    Ok(())
}

/// The whole trajectory `Lambda_0..=Lambda_T` as a rank-4 tensor.
fn field_tensor(field: &MixField) -> Tensor {
    let [c, h, w] = field.shape();
    let data = field.slices().iter().flat_map(|s| s.iter().map(|&v| v as f32)).collect();
    Tensor::new(vec![field.steps() + 1, c, h, w], data).expect("slice sizes match")
}

pub fn sample(config: &Path, params: Option<PathBuf>, data: Option<PathBuf>, dump_every: usize) -> Result<()> {
    let cfg = load_config(config, "sample")?;
    let pairs = load_dataset(&data.unwrap_or_else(|| cfg.out_dir.join("dataset")))?;
    let sched = schedule(&cfg)?;
    let shape = pairs[0].shape();
    let params = params.unwrap_or_else(|| cfg.out_dir.join("model.cdp"));
    let (net, stored) = read_model(&params, &sched, shape)?;
    let mixer = match (cfg.schedule_variant, stored) {
        (ScheduleVariant::Linear, _) => Mixer::Fixed(MixField::linear(&sched, shape, MixOptions::truncated(cfg.t1))?),
        (ScheduleVariant::Channel, m @ Mixer::ChannelPoly { .. }) | (ScheduleVariant::Dynamic, m @ Mixer::Dynamic { .. }) => m,
        (v, _) => {
            return Err(Error::Config(format!(
                "{} holds no trained {} mixer",
                params.display(),
                v.name()
            )))
        }
    };
    let field = mixer.build(&sched, shape)?;
    let predictor = ToyPredictor::new(net, &field, &sched)?;
    let sampler = SamplerConfig::new(cfg.sampler_steps, cfg.t1);

    let samples = cfg.out_dir.join("samples");
    let previews = cfg.out_dir.join("previews");
    let traj = cfg.out_dir.join("trajectories");
    fs::create_dir_all(&samples)?;
    fs::create_dir_all(&previews)?;
    if dump_every > 0 {
        fs::create_dir_all(&traj)?;
    }
    write_tensor(&cfg.out_dir.join("mixfield.cdt"), &field_tensor(&field))?;
    for (i, pair) in pairs.iter().enumerate() {
        let name = pair_name(i);
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed, i));
        let mut dumps: Vec<(usize, Field)> = Vec::new();
        let mut k = 0usize;
        let out = sample_with_observer(&predictor, &pair.x_src, &sampler, &field, &sched, &mut rng, |t, x| {
            if dump_every > 0 && k % dump_every == 0 {
                dumps.push((t, x.clone()));
            }
            k += 1;
        })?;
        for (t, x) in dumps {
            write_field(&traj.join(format!("{name}_t{t:04}.cdt")), &x)?;
        }
        write_field(&samples.join(format!("{name}_gen.cdt")), &out)?;
        write_previews(&previews, &format!("{name}_gen"), &out)?;
        write_previews(&previews, &format!("{name}_src"), &pair.x_src)?;
    }
    println!("sampled {} pairs into {}", pairs.len(), samples.display());
    Ok(())
}

pub fn evaluate(config: &Path, generated: Option<PathBuf>, data: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, "evaluate")?;
    let pairs = load_dataset(&data.unwrap_or_else(|| cfg.out_dir.join("dataset")))?;
    let dir = generated.unwrap_or_else(|| cfg.out_dir.join("samples"));
    let gens = (0..pairs.len())
        .map(|i| read_field(&dir.join(format!("{}_gen.cdt", pair_name(i)))))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Field> = pairs.iter().map(|p| p.x_tgt.clone()).collect();
    let masks: Option<Vec<_>> = pairs.iter().map(|p| p.mask.clone()).collect();
    let report = evaluate_pairs(&gens, &refs, masks.as_deref())?;
    let mut bytes = Vec::new();
    report.write_csv(&mut bytes)?;
    write_atomic(&cfg.out_dir.join("metrics.csv"), &bytes)?;
    for name in &report.names {
        println!(
            "{name}: {:.4} +- {:.4}",
            report.mean(name).unwrap_or(f64::NAN),
            report.std(name).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

pub fn energy(config: &Path) -> Result<()> {
    let cfg = load_config(config, "energy")?;
    let opts = SolverOptions {
        seed: cfg.seed,
        ..SolverOptions::default()
    };
    let mut rows = Vec::new();
    for (name, heterogeneous) in [("heterogeneous", true), ("homogeneous", false)] {
        let (spec, pair) = reference_instance(DEFAULT_GRID, heterogeneous);
        let report = verify_strict_domination(&spec, &pair, &opts)?;
        for (class, path) in [("global", &report.global.path), ("pixelwise", &report.pixelwise.path)] {
            let values = path.values.view();
            write_tensor(&cfg.out_dir.join(format!("energy_{name}_{class}.cdt")), &Tensor::from_plane(values))?;
        }
        println!(
            "{name}: E_glob {:.6} E_pix {:.6} gap {:.6} ({})",
            report.e_glob,
            report.e_pix,
            report.gap,
            report.note()
        );
        rows.push([
            name.to_string(),
            report.e_glob.to_string(),
            report.e_pix.to_string(),
            report.gap.to_string(),
        ]);
    }
    let bytes = csv_bytes(|w| {
        w.write_record(["instance", "E_glob", "E_pix", "gap"])?;
        for r in &rows {
            w.write_record(r)?;
        }
        Ok(())
    })?;
    write_atomic(&cfg.out_dir.join("energy.csv"), &bytes)
}

/// Returns whether every check passed.
pub fn verify(config: Option<&Path>, ablation: bool) -> Result<bool> {
    let cfg = config.map(|p| load_config(p, "verify")).transpose()?;
    let mut opts = SuiteOptions::default();
    if let Some(cfg) = &cfg {
        opts.seed = cfg.seed;
    }
    opts.ablation = ablation;
    let reports = run_suite(&opts, |r| println!("{}", r.line()))?;
    let passed = reports.iter().filter(|r| r.passed).count();
    println!("{passed} of {} checks passed", reports.len());
    if let Some(cfg) = &cfg {
        let text: String = reports.iter().map(|r| r.line() + "\n").collect();
        write_atomic(&cfg.out_dir.join("verify.txt"), text.as_bytes())?;
    }
    Ok(passed == reports.len())
}
