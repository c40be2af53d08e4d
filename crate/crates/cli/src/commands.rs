use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hybridcast::dataio::{self, last_value, seasonal_naive};
use hybridcast::decomp::{decompose as decompose_series, EmaConfig};
use hybridcast::model::{self, evaluate, load_checkpoint, metrics, save_checkpoint, write_history_csv, Model};
use hybridcast::ndgrad::Tensor;
use hybridcast::{Error, Result};

use crate::config::RunConfig;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = out_dir(&cfg, out)?;
    let (_, splits) = cfg.splits()?;

    let resolved = dir.join("config.resolved.toml");
    fs::write(&resolved, cfg.resolved()?.to_toml()).map_err(io_err(&resolved))?;
    let manifest = dir.join("windows.csv");
    let mut w = create(&manifest)?;
    dataio::write_window_manifest(&splits, &mut w).map_err(io_err(&manifest))?;
    w.flush().map_err(io_err(&manifest))?;

    let mut model = Model::new(cfg.model.clone())?;
    let outcome = model::train(&mut model, &splits.train, Some(&splits.val))?;

    let history = dir.join("history.csv");
    let mut w = create(&history)?;
    write_history_csv(&outcome.history, &mut w).map_err(io_err(&history))?;
    w.flush().map_err(io_err(&history))?;
    let ckpt = dir.join("checkpoint.bin");
    save_checkpoint(&model, &ckpt)?;

    let last = outcome.history.last().expect("at least one step");
    println!("steps        {}", outcome.history.len());
    println!("train_mse    {:.6}", last.train_mse);
    match (outcome.best_val_mse, outcome.best_step) {
        (Some(v), Some(s)) => println!("best_val_mse {v:.6} (step {s})"),
        _ => println!("best_val_mse n/a (no validation windows)"),
    }
    if outcome.stopped_early {
        println!("stopped early");
    }
    println!("checkpoint   {}", ckpt.display());
    Ok(())
}

pub fn eval(config: &Path, checkpoint: &Path, out: Option<PathBuf>, seed: Option<u64>, baselines: bool) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = out_dir(&cfg, out)?;
    let model = load_checkpoint(checkpoint, Some(&cfg.model))?;
    let (_, splits) = cfg.splits()?;
    let report = evaluate(&model, &splits.test)?;

    let path = dir.join("metrics.csv");
    let mut w = create(&path)?;
    let mut rows = vec![("all".to_string(), report.mse, report.mae)];
    rows.extend(report.per_horizon.iter().enumerate().map(|(h, m)| ((h + 1).to_string(), m.mse, m.mae)));
    if baselines || cfg.output.baselines {
        let t = cfg.model.horizon;
        let (xs, ys): (Vec<Tensor>, Vec<Tensor>) = (0..splits.test.len()).map(|i| splits.test.sample(i)).unzip();
        let x = Tensor::stack(&xs)?;
        let y = Tensor::stack(&ys)?;
        let (lv, lva, _) = metrics(&last_value(&x, t), &y)?;
        let (sn, sna, _) = metrics(&seasonal_naive(&x, t, cfg.data.season)?, &y)?;
        rows.push(("last_value".into(), lv, lva));
        rows.push(("seasonal_naive".into(), sn, sna));
    }
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "horizon,mse,mae")?;
        for (h, mse, mae) in &rows {
            writeln!(w, "{h},{mse:e},{mae:e}")?;
        }
        w.flush()
    };
    write(&mut w).map_err(io_err(&path))?;

    let gpath = dir.join("gates.csv");
    let mut g = create(&gpath)?;
    let write_gates = |g: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(g, "expert,patch_size,utilization")?;
        for (e, (u, p)) in report.gate_utilization.iter().zip(&cfg.model.patch_sizes).enumerate() {
            writeln!(g, "{e},{p},{u:e}")?;
        }
        g.flush()
    };
    write_gates(&mut g).map_err(io_err(&gpath))?;

    println!("{:<16} {:>12} {:>12}", "horizon", "mse", "mae");
    for (h, mse, mae) in rows.iter().filter(|r| r.0.parse::<usize>().is_err()) {
        println!("{h:<16} {mse:>12.6} {mae:>12.6}");
    }
    println!("test windows {}", splits.test.len());
    for (e, u) in report.gate_utilization.iter().enumerate() {
        println!("expert {e} (patch {}) utilization {u:.4}", cfg.model.patch_sizes[e]);
    }
    Ok(())
}

pub fn predict(config: &Path, checkpoint: &Path, input: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = out_dir(&cfg, out)?;
    let model = load_checkpoint(checkpoint, Some(&cfg.model))?;
    let table = match input {
        Some(p) => dataio::load_csv(p)?.0,
        None => cfg.table()?,
    };
    let l = cfg.model.lookback;
    if table.len() < l || table.num_channels() != cfg.model.channels {
        return Err(Error::Config(format!(
            "input needs at least {l} rows of {} channels, got {} rows of {}",
            cfg.model.channels,
            table.len(),
            table.num_channels()
        )));
    }
    let x = table.channel_major(table.len() - l, l).reshape([1, cfg.model.channels, l])?;
    let (y, _) = model.predict(&x)?;
    let path = dir.join("predictions.csv");
    let mut w = create(&path)?;
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "step,{}", table.channels.join(","))?;
        for h in 0..cfg.model.horizon {
            let row: Vec<String> = (0..cfg.model.channels).map(|c| y.at(&[0, c, h]).to_string()).collect();
            writeln!(w, "{},{}", h + 1, row.join(","))?;
        }
        w.flush()
    };
    write(&mut w).map_err(io_err(&path))?;
    println!("wrote {} forecast steps to {}", cfg.model.horizon, path.display());
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn decompose(config: &Path, input: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let dir = out_dir(&cfg, out)?;
    let (table, _) = dataio::load_csv(input)?;
    let n = table.len();
    let ema_cfg = EmaConfig::new(cfg.model.alpha)?;
    for (c, name) in table.channels.iter().enumerate() {
        let x = Tensor::new([1, n], table.channel(c))?;
        let d = decompose_series(&x, ema_cfg, cfg.model.k_freq, &cfg.model.trend_kernels)
            .map_err(|e| Error::Config(format!("channel {name}: {e}")))?;
        let path = dir.join(format!("decomp_{}.csv", file_stem(name)));
        let mut w = create(&path)?;
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            writeln!(w, "t,original,trend_ema,seasonal_ema,seasonal_freq,trend_multi_kernel")?;
            for t in 0..n {
                writeln!(
                    w,
                    "{t},{},{},{},{},{}",
                    x.data()[t],
                    d.trend_ema.data()[t],
                    d.seasonal_ema.data()[t],
                    d.seasonal_freq.data()[t],
                    d.trend_freq_input.data()[t]
                )?;
            }
            w.flush()
        };
        write(&mut w).map_err(io_err(&path))?;
    }
    println!("decomposed {} channel(s) of {n} rows into {}", table.num_channels(), dir.display());
    Ok(())
}
