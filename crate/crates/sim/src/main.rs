use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lora_mpr::aggregate::{aggregate, decode_reading, AggregateFn};
use lora_mpr::demod::Strategy;
use lora_mpr::dsp::Dsp;
use lora_mpr::receiver::Receiver;
use lora_mpr::{CodingRate, LoraParams};
use lora_mpr_sim::config::{parse_snr, ExperimentConfig, Mode};
use lora_mpr_sim::metrics::{write_csv, MetricsRow};
use lora_mpr_sim::trace::{read_trace, write_trace, TraceMeta};
use lora_mpr_sim::{net, phy, scenario, studies};

#[derive(Parser)]
#[command(name = "lora-mpr", about = "Concurrent LoRa reception experiments", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// SER/BER/PER and PHY throughput over an SNR grid.
    PhySim(Common),
    /// Probability that two users' peaks share a bin, per SF and user count.
    ColocatedStudy(Common),
    /// PER with a perfect demodulator except for co-located peaks.
    IdealMappingStudy(Common),
    /// Coordinated vs ALOHA data collection over simulated time.
    NetSim {
        #[command(flatten)]
        common: Common,
        /// Simulated seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Write one synthetic concurrent transmission to a trace file.
    MakeTrace {
        #[command(flatten)]
        common: Common,
        /// Sample file; metadata goes to `<trace>.json`.
        trace: PathBuf,
    },
    /// Decode a trace file and print one JSON line per user.
    DecodeTrace {
        #[command(flatten)]
        common: Common,
        trace: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    sf: Option<u8>,
    /// Bandwidth in Hz.
    #[arg(long)]
    bw: Option<f64>,
    /// Coding rate, `4/5`..`4/8` or the codeword length `5`..`8`.
    #[arg(long)]
    cr: Option<String>,
    #[arg(long)]
    users: Option<usize>,
    /// Comma-separated SNRs in dB; `inf` for noiseless.
    #[arg(long)]
    snr: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON experiment file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_cr(s: &str) -> anyhow::Result<CodingRate> {
    let n = s.strip_prefix("4/").unwrap_or(s);
    let n: u8 = n.parse().with_context(|| format!("bad coding rate {s:?}"))?;
    Ok(CodingRate::new(n)?)
}

impl Common {
    fn config(&self, mode: Mode) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        c.mode = mode;
        if let Some(sf) = self.sf {
            c.params.sf = sf;
        }
        if let Some(bw) = self.bw {
            c.params.bw = bw;
        }
        if let Some(cr) = &self.cr {
            c.params.cr = parse_cr(cr)?;
        }
        if let Some(u) = self.users {
            c.users = u;
        }
        if let Some(s) = &self.snr {
            c.snr_grid = s.split(',').map(parse_snr).collect::<Result<_, _>>()?;
        }
        if let Some(t) = self.trials {
            c.trials = t;
        }
        if let Some(s) = self.strategy {
            c.strategy = s;
        }
        if let Some(k) = self.topk {
            c.top_k = k;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }

    fn emit(&self, rows: &[MetricsRow]) -> anyhow::Result<()> {
        match &self.out {
            Some(path) => write_csv(rows, File::create(path).with_context(|| path.display().to_string())?)?,
            None => write_csv(rows, io::stdout().lock())?,
        }
        Ok(())
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::PhySim(common) => {
            let cfg = common.config(Mode::Phy)?;
            let mut points = Vec::new();
            for i in 0..cfg.snr_grid.len() {
                let pt = phy::run_phy_point(&cfg, i)?;
                eprintln!(
                    "snr {} dB: ser {:.5} ber hard {:.2e} soft {:.2e} failures {}",
                    pt.snr_db,
                    pt.ser(),
                    pt.ber_hard(),
                    pt.ber_soft(),
                    pt.tally.failures
                );
                points.push(pt);
            }
            common.emit(&phy::phy_rows(&cfg, &points))
        }
        Cmd::ColocatedStudy(common) => {
            let cfg = common.config(Mode::Colocated)?;
            let (users, sfs) = sweep(&common);
            common.emit(&studies::colocated_rows(&cfg, &users, &sfs)?)
        }
        Cmd::IdealMappingStudy(common) => {
            let cfg = common.config(Mode::IdealMap)?;
            let (users, sfs) = sweep(&common);
            common.emit(&studies::ideal_mapping_rows(&cfg, &users, &sfs)?)
        }
        Cmd::NetSim { common, duration } => {
            let mut cfg = common.config(Mode::Net)?;
            if common.users.is_none() && common.config.is_none() {
                cfg.users = 4;
            }
            if let Some(d) = duration {
                cfg.duration_s = d;
            }
            cfg.validate()?;
            let mut rows = Vec::new();
            for i in 0..cfg.snr_grid.len() {
                let outs = net::run_net_co(&cfg, i)?;
                for o in &outs {
                    eprintln!(
                        "snr {} dB {}: {:.1} bit/s, complete aggregates {}/{}",
                        cfg.snr_grid[i],
                        o.decoder,
                        o.throughput(),
                        o.complete_rounds,
                        o.rounds
                    );
                }
                rows.extend(net::net_rows(&cfg, Some(cfg.snr_grid[i]), &outs));
            }
            let unco = net::run_net_unco(&cfg)?;
            rows.extend(net::net_rows(&cfg, None, &[unco]));
            eprintln!("ideal coordinated throughput {:.1} bit/s", net::ideal_throughput(&cfg.params, cfg.users));
            common.emit(&rows)
        }
        Cmd::MakeTrace { common, trace } => {
            let cfg = common.config(Mode::Phy)?;
            let dsp = Dsp::new(&cfg.params)?;
            let snr = cfg.snr_grid[0];
            let mut rng = scenario::trial_rng(cfg.seed, 0, 0);
            let t = scenario::draw_trial(&mut rng, cfg.users, &cfg.limits(), snr, &dsp)?;
            let meta = TraceMeta {
                rate: t.signal.rate,
                sf: cfg.params.sf,
                bw: cfg.params.bw,
                cr: cfg.params.cr.n_c() as u8,
                users: cfg.users,
                samples: t.signal.len(),
                snr_db: snr.is_finite().then_some(snr),
                lead: Some(t.lead),
                nodes: Some(t.nodes),
            };
            write_trace(&trace, &t.signal, &meta)?;
            eprintln!("wrote {} samples to {}", meta.samples, trace.display());
            Ok(())
        }
        Cmd::DecodeTrace { common, trace } => decode_trace(&common, &trace),
    }
}

fn sweep(common: &Common) -> (Vec<usize>, Vec<u8>) {
    let users = common.users.map_or(studies::STUDY_USERS.to_vec(), |u| vec![u]);
    let sfs = common.sf.map_or(studies::STUDY_SFS.to_vec(), |s| vec![s]);
    (users, sfs)
}

fn decode_trace(common: &Common, path: &PathBuf) -> anyhow::Result<()> {
    let (buf, meta) = read_trace(path)?;
    let mut cfg = common.config(Mode::Phy)?;
    cfg.params = LoraParams {
        sf: meta.sf,
        bw: meta.bw,
        cr: CodingRate::new(meta.cr)?,
        ..cfg.params
    };
    if common.users.is_none() {
        cfg.users = meta.users;
    }
    cfg.validate()?;
    if (buf.rate - cfg.params.osr_rx as f64 * cfg.params.bw).abs() > 1e-6 * buf.rate {
        bail!("trace rate {} Hz does not match the receiver grid", buf.rate);
    }
    let rx = Receiver::new(&cfg.params, cfg.receiver())?;
    let rec = rx.receive(&buf)?;
    let mut out = io::stdout().lock();
    let mut readings = Vec::new();
    for (slot, (d, est)) in rec.nodes.iter().zip(&rec.acquisition.nodes).enumerate() {
        let truth = meta
            .nodes
            .as_ref()
            .map(|ns| ns.iter().any(|n| n.payload == d.soft.payload));
        if d.soft.crc_ok {
            readings.extend(decode_reading(&d.soft.payload));
        }
        let line = serde_json::json!({
            "slot": slot,
            "cfo_hz": est.cfo,
            "to_s": est.to,
            "crc_ok_hard": d.hard.crc_ok,
            "crc_ok_soft": d.soft.crc_ok,
            "payload": d.soft.payload.iter().map(|b| format!("{b:02x}")).collect::<String>(),
            "reading": decode_reading(&d.soft.payload),
            "matches_ground_truth": truth,
        });
        writeln!(out, "{line}")?;
    }
    match aggregate(&readings, AggregateFn::Average) {
        Ok(a) => eprintln!("average reading {:.2} over {} nodes", a.value, a.count),
        Err(e) => eprintln!("aggregate: {e}"),
    }
    Ok(())
}
