//! Command-line front end: `simulate`, `run-ot`, `rates` and `match`.
//!
//! Exit codes: 0 success, 2 usage, 3 protocol abort (reason on stderr),
//! 4 I/O.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::auth::SecretStore;
use crate::bits::BitString;
use crate::cascade::seed_from;
use crate::mpc::{self, ExtBase, FingerprintDb, MatchInput, MatchReport, MpcChannel, MpcError, MpcRole, OtLedger, RotPair};
use crate::otcore::{AbortReason, OtResult};
use crate::params::{self, ProtocolParams};
use crate::pipeline::control::{choices_from_hex, serve};
use crate::pipeline::{demo_secret, Client, Endpoint, EndpointConfig, FileSource, OtOutcome, RawSource, SimSource};
use crate::qsim::{generate_block_with_id, write_raw, ChannelModel};
use crate::transport::{loopback_pair, tags, Lane, TamperRule, Tampering, TcpTransport, Transport, TransportError};
use crate::Party;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("abort: {0}")]
    Abort(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Abort(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::ParamsMismatch => CliError::Abort(AbortReason::ParamsMismatch.to_string()),
            TransportError::RoleConflict(_) | TransportError::VersionMismatch { .. } | TransportError::BadHello => {
                CliError::Abort(format!("{} ({e})", AbortReason::ProtocolViolation))
            }
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<MpcError> for CliError {
    fn from(e: MpcError) -> Self {
        match e {
            MpcError::File(_) | MpcError::Transport(_) => CliError::Io(e.to_string()),
            _ => CliError::Abort(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "qot", version, about = "Quantum oblivious transfer pipeline and OT-backed matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a pair of simulated raw blocks plus a manifest.
    Simulate(SimulateArgs),
    /// Run one endpoint (or both, over loopback) and produce OTs.
    RunOt(RunOtArgs),
    /// Tabulate OT rate against epsilon and channel loss.
    Rates(RatesArgs),
    /// Private fingerprint matching on top of 128 base OTs.
    Match(MatchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Table1,
    Desk,
    Smoke,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    Loopback,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Sender,
    Receiver,
}

impl From<RoleArg> for Party {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Sender => Party::Sender,
            RoleArg::Receiver => Party::Receiver,
        }
    }
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Flat key=value parameter file; overrides --preset.
    #[arg(long)]
    pub params_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table1")]
    pub preset: Preset,
}

impl ParamsArgs {
    pub fn load(&self) -> Result<ProtocolParams> {
        match &self.params_file {
            Some(p) => ProtocolParams::load(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::InvalidData => CliError::Usage(format!("{}: {e}", p.display())),
                _ => CliError::Io(format!("{}: {e}", p.display())),
            }),
            None => Ok(match self.preset {
                Preset::Table1 => ProtocolParams::default(),
                Preset::Desk => ProtocolParams::desk_scale(),
                Preset::Smoke => ProtocolParams::smoke_scale(),
            }),
        }
    }
}

#[derive(Debug, Args)]
pub struct ChannelArgs {
    /// Channel loss in dB applied to the calibrated model.
    #[arg(long, default_value_t = 0.0)]
    pub loss_db: f64,
    /// Flat QBER in both bases instead of the calibrated model.
    #[arg(long)]
    pub qber: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ChannelArgs {
    pub fn model(&self) -> Result<ChannelModel> {
        if !(self.loss_db >= 0.0) {
            return Err(CliError::Usage("--loss-db must be non-negative".into()));
        }
        match self.qber {
            Some(q) if !(0.0..=0.5).contains(&q) => Err(CliError::Usage("--qber must lie in [0, 0.5]".into())),
            Some(q) => Ok(ChannelModel::with_qber(q).at_loss(self.loss_db)),
            None => Ok(ChannelModel::default().at_loss(self.loss_db)),
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 3_200_000)]
    pub n0: usize,
    #[command(flatten)]
    pub channel: ChannelArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of consecutive blocks to write.
    #[arg(long, default_value_t = 1)]
    pub blocks: u64,
    #[arg(long, default_value_t = 0)]
    pub first_block_id: u64,
}

#[derive(Debug, Args)]
pub struct ConnArgs {
    #[arg(long, value_enum)]
    pub role: Option<RoleArg>,
    /// host:port. The sender listens, the receiver connects.
    #[arg(long, default_value = "127.0.0.1:7400")]
    pub endpoint: String,
    #[arg(long, value_enum, default_value = "tcp")]
    pub transport: TransportKind,
    #[command(flatten)]
    pub params: ParamsArgs,
    /// Directory of `block_<id>_<party>.qraw` files.
    #[arg(long, conflicts_with = "live_sim")]
    pub raw_dir: Option<PathBuf>,
    /// Generate raw events on the fly (both sides must use the same seed).
    #[arg(long)]
    pub live_sim: bool,
    #[command(flatten)]
    pub channel: ChannelArgs,
    /// Hex-encoded bootstrap secret shared by both parties.
    #[arg(long)]
    pub secret_file: Option<PathBuf>,
    /// Flip one outgoing bit: `TAG:nth:bit`, e.g. `PAIR:0:5`.
    #[arg(long, hide = true)]
    pub tamper: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunOtArgs {
    #[command(flatten)]
    pub conn: ConnArgs,
    /// `count x length`, e.g. `128x128`.
    #[arg(long, default_value = "1x128")]
    pub request: String,
    /// Receiver choice bits, MSB-first. Random from --seed when absent.
    #[arg(long)]
    pub choices_hex: Option<String>,
    /// OT outputs as hex lines; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stage log and summary records.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Serve the REQ/RES control protocol on this address instead of --request.
    #[arg(long)]
    pub control: Option<String>,
}

#[derive(Debug, Args)]
pub struct RatesArgs {
    #[command(flatten)]
    pub params: ParamsArgs,
    /// Comma-separated epsilon targets.
    #[arg(long, default_value = "1e-8,1e-6,1e-3")]
    pub eps: String,
    /// Loss grid as `start:stop:step` in dB, or a comma list.
    #[arg(long, default_value = "0:12:0.5")]
    pub loss_grid: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Coincidence rate at 0 dB.
    #[arg(long, default_value_t = 28_300.0)]
    pub coincidence_hz: f64,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub conn: ConnArgs,
    /// Database file (QOTFPDB1).
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Template file (QOTFPDB1 with one row).
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Squared-distance threshold in feature units.
    #[arg(long, default_value_t = 0.25)]
    pub threshold: f64,
    /// Base OTs from an earlier run-ot (its --out file).
    #[arg(long, conflicts_with = "dealer_seed")]
    pub base_ots: Option<PathBuf>,
    /// Trusted-dealer base OTs instead of a quantum run (testing only).
    #[arg(long)]
    pub dealer_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses and runs; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("qot: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::RunOt(a) => cmd_run_ot(&a, out),
        Command::Rates(a) => cmd_rates(&a, out),
        Command::Match(a) => cmd_match(&a, out),
    }
}

// ---------------------------------------------------------------- simulate

pub fn cmd_simulate(a: &SimulateArgs, out: &mut dyn std::io::Write) -> Result<()> {
    if a.n0 == 0 || a.blocks == 0 {
        return Err(CliError::Usage("--n0 and --blocks must be positive".into()));
    }
    let model = a.channel.model()?;
    fs::create_dir_all(&a.out_dir)?;
    let point = model.channel_at(model.loss_db);
    let mut manifest = String::new();
    let _ = writeln!(manifest, "n0={}", a.n0);
    let _ = writeln!(manifest, "loss_db={}", a.channel.loss_db);
    let _ = writeln!(manifest, "seed={}", a.channel.seed);
    let _ = writeln!(manifest, "coincidence_hz={}", point.coincidence_hz);
    let _ = writeln!(manifest, "qber_hv={}", point.qber_hv);
    let _ = writeln!(manifest, "qber_da={}", point.qber_da);
    let _ = writeln!(manifest, "accidental_floor={}", model.accidental_floor);
    let _ = writeln!(manifest, "fiber_km={}", model.fiber_km(a.channel.loss_db));
    let _ = writeln!(manifest, "accumulation_s={}", a.n0 as f64 / point.coincidence_hz);
    for k in 0..a.blocks {
        let id = a.first_block_id + k;
        let seed = block_seed(a.channel.seed, id);
        let (ba, bb) = generate_block_with_id(&model, a.n0, seed, id);
        for b in [&ba, &bb] {
            let p = write_raw(&a.out_dir, b).map_err(|e| CliError::Io(e.to_string()))?;
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            let _ = writeln!(manifest, "file={name}");
            writeln!(out, "{}", p.display())?;
        }
    }
    fs::write(a.out_dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn block_seed(seed: u64, id: u64) -> [u8; 32] {
    let mut d = seed.to_be_bytes().to_vec();
    d.extend(id.to_be_bytes());
    seed_from(b"qot-sim-block", &d)
}

// ---------------------------------------------------------------- run-ot

pub fn parse_request(s: &str) -> Result<(usize, usize)> {
    let s = s.replace('×', "x");
    let (c, l) = s
        .split_once(['x', 'X', '*'])
        .ok_or_else(|| CliError::Usage(format!("request must look like 128x128, got {s:?}")))?;
    let num = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("bad request number {v:?}")))
    };
    Ok((num(c)?, num(l)?))
}

/// `TAG:nth:bit` on the OT lane.
pub fn parse_tamper(s: &str) -> Result<TamperRule> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Usage(format!("tamper rule must be TAG:nth:bit, got {s:?}"));
    let [tag, nth, bit] = parts.as_slice() else {
        return Err(bad());
    };
    let tag = tags::ALL
        .iter()
        .copied()
        .find(|t| tags::name(t) == *tag)
        .ok_or_else(bad)?;
    Ok(TamperRule {
        lane: Lane::Ot,
        tag,
        nth: nth.parse().map_err(|_| bad())?,
        bit: bit.parse().map_err(|_| bad())?,
    })
}

type Dyn = Box<dyn Transport>;

fn store_from(conn: &ConnArgs) -> Result<SecretStore> {
    match &conn.secret_file {
        Some(p) => SecretStore::from_hex_file(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            eprintln!("qot: no --secret-file, using the built-in demo secret");
            Ok(SecretStore::new(&demo_secret(4096, 0)))
        }
    }
}

fn source_for(conn: &ConnArgs, role: Party) -> Result<Box<dyn RawSource>> {
    match (&conn.raw_dir, conn.live_sim) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(CliError::Io(format!("{} is not a directory", dir.display())));
            }
            Ok(Box::new(FileSource::new(dir, role)))
        }
        (None, true) => {
            let sim_seed = seed_from(b"qot-sim", &conn.channel.seed.to_be_bytes());
            Ok(Box::new(SimSource::new(conn.channel.model()?, role, 100_000, sim_seed)))
        }
        (None, false) => Err(CliError::Usage("pick --raw-dir or --live-sim".into())),
    }
}

fn config_for(conn: &ConnArgs, role: Party, params: &ProtocolParams) -> EndpointConfig {
    let mut cfg = EndpointConfig::new(role, params.clone());
    cfg.seed = seed_from(b"qot-party", &conn.channel.seed.to_be_bytes());
    cfg
}

fn wrap(t: Dyn, tamper: &Option<TamperRule>) -> Dyn {
    match tamper {
        Some(rule) => Box::new(Tampering::new(t, rule.clone())),
        None => t,
    }
}

/// The connected endpoint for this process's role.
fn connect_tcp(conn: &ConnArgs, role: Party, params: &ProtocolParams) -> Result<Endpoint<Dyn>> {
    let tamper = conn.tamper.as_deref().map(parse_tamper).transpose()?;
    let t: Dyn = match role {
        Party::Sender => Box::new(TcpTransport::listen(&conn.endpoint)?),
        Party::Receiver => Box::new(TcpTransport::connect(conn.endpoint.as_str(), Duration::from_secs(60))?),
    };
    let ep = Endpoint::connect(
        config_for(conn, role, params),
        wrap(t, &tamper),
        store_from(conn)?,
        source_for(conn, role)?,
    )?;
    Ok(ep)
}

/// Both endpoints in this process. The tamper rule applies to `role`.
fn connect_loopback(conn: &ConnArgs, role: Party, params: &ProtocolParams) -> Result<(Endpoint<Dyn>, Endpoint<Dyn>)> {
    let tamper = conn.tamper.as_deref().map(parse_tamper).transpose()?;
    let (ta, tb) = loopback_pair();
    let (mut ta, mut tb): (Dyn, Dyn) = (Box::new(ta), Box::new(tb));
    match role {
        Party::Sender => ta = wrap(ta, &tamper),
        Party::Receiver => tb = wrap(tb, &tamper),
    }
    let store = store_from(conn)?;
    Ok(crate::pipeline::connect_pair(
        (config_for(conn, Party::Sender, params), ta, source_for(conn, Party::Sender)?),
        (config_for(conn, Party::Receiver, params), tb, source_for(conn, Party::Receiver)?),
        &store,
    )?)
}

fn choices_for(a: &RunOtArgs, count: usize) -> Result<Vec<bool>> {
    match &a.choices_hex {
        Some(h) => choices_from_hex(h, count).map_err(CliError::Usage),
        None => {
            let mut rng = ChaCha20Rng::seed_from_u64(a.conn.channel.seed ^ 0xC401CE);
            Ok((0..count).map(|_| rng.gen()).collect())
        }
    }
}

/// Report records: the stage log plus summary fields in the same
/// `ts phase event detail` shape.
pub fn render_report<T: Transport>(ep: &Endpoint<T>, wall_secs: f64) -> String {
    let mut s = String::new();
    for r in ep.log() {
        let _ = writeln!(s, "{r}");
    }
    for rep in ep.reports() {
        for st in &rep.stages {
            let _ = writeln!(
                s,
                "{wall_secs:.6} summary stage {}#{} {} secs={:.6} sent={}/{} recv={}/{} auth_ok={}",
                if rep.lane == Lane::Ot { "ot" } else { "qkd" },
                rep.session,
                st.name,
                st.secs,
                st.sent_msgs,
                st.sent_bytes,
                st.recv_msgs,
                st.recv_bytes,
                st.auth_ok
            );
        }
    }
    let sum = ep.summary();
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    let _ = writeln!(s, "{wall_secs:.6} summary qber_meas {}", opt(sum.qber_meas));
    let _ = writeln!(s, "{wall_secs:.6} summary f_meas {}", opt(sum.f_meas));
    let _ = writeln!(s, "{wall_secs:.6} summary ot_per_s {:.6}", sum.ot_per_s);
    let _ = writeln!(s, "{wall_secs:.6} summary ots_done {}", sum.ots_done);
    let _ = writeln!(s, "{wall_secs:.6} summary ots_aborted {}", sum.ots_aborted);
    let _ = writeln!(s, "{wall_secs:.6} summary qkd_rounds {}", sum.qkd_rounds);
    s
}

fn write_lines(path: &Option<PathBuf>, out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

fn first_abort(results: &[OtOutcome]) -> Option<AbortReason> {
    results.iter().find_map(|r| r.as_ref().err().copied())
}

pub fn cmd_run_ot(a: &RunOtArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let params = a.conn.params.load()?;
    let (count, length) = parse_request(&a.request)?;
    let role: Party = a.conn.role.map(Into::into).unwrap_or(Party::Sender);
    if a.conn.role.is_none() && a.conn.transport == TransportKind::Tcp {
        return Err(CliError::Usage("--role is required with --transport tcp".into()));
    }
    if a.choices_hex.is_some() && role == Party::Sender && a.conn.transport == TransportKind::Tcp {
        return Err(CliError::Usage("--choices-hex belongs to the receiver".into()));
    }
    let started = Instant::now();
    match a.conn.transport {
        TransportKind::Tcp => {
            let ep = connect_tcp(&a.conn, role, &params)?;
            if let Some(addr) = &a.control {
                let listener = TcpListener::bind(addr)?;
                eprintln!("qot: control socket on {}", listener.local_addr()?);
                let client = Client::spawn(ep);
                serve(listener, &client)?;
                if let Some(ep) = client.shutdown() {
                    if let Some(p) = &a.report {
                        fs::write(p, render_report(&ep, started.elapsed().as_secs_f64()))?;
                    }
                }
                return Ok(());
            }
            let mut ep = ep;
            let choices = choices_for(a, count)?;
            let results: Vec<OtOutcome> = (0..count)
                .map(|i| ep.run_ot(length, (role == Party::Receiver).then(|| choices[i])))
                .collect();
            finish_run(a, &ep, &results, out, started)
        }
        TransportKind::Loopback => {
            let (mut s, mut r) = connect_loopback(&a.conn, role, &params)?;
            let choices = choices_for(a, count)?;
            let (rs, rr) = std::thread::scope(|sc| {
                let h = sc.spawn(|| (0..count).map(|_| s.run_ot(length, None)).collect::<Vec<_>>());
                let rr: Vec<_> = choices.iter().map(|&c| r.run_ot(length, Some(c))).collect();
                (h.join().expect("sender thread panicked"), rr)
            });
            for (x, y) in rs.iter().zip(&rr) {
                if let (Ok(x), Ok(y)) = (x, y) {
                    writeln!(out, "sender {}", x.to_hex_line())?;
                    writeln!(out, "receiver {}", y.to_hex_line())?;
                }
            }
            match role {
                Party::Sender => finish_run(a, &s, &rs, &mut std::io::sink(), started),
                Party::Receiver => finish_run(a, &r, &rr, &mut std::io::sink(), started),
            }
            .and_then(|_| {
                // the peer may have failed first
                match first_abort(&rs).or(first_abort(&rr)) {
                    Some(reason) => Err(CliError::Abort(reason.to_string())),
                    None => Ok(()),
                }
            })
        }
    }
}

fn finish_run<T: Transport>(
    a: &RunOtArgs,
    ep: &Endpoint<T>,
    results: &[OtOutcome],
    out: &mut dyn std::io::Write,
    started: Instant,
) -> Result<()> {
    let lines: String = results
        .iter()
        .filter_map(|r| r.as_ref().ok())
        .map(|r| r.to_hex_line() + "\n")
        .collect();
    if a.out.is_some() || a.conn.transport == TransportKind::Tcp {
        write_lines(&a.out, out, &lines)?;
    }
    if let Some(p) = &a.report {
        fs::write(p, render_report(ep, started.elapsed().as_secs_f64()))?;
    }
    match first_abort(results) {
        Some(reason) => Err(CliError::Abort(reason.to_string())),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------- rates

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad {what} value {v:?}")))
        })
        .collect()
}

/// `start:stop:step` (inclusive) or a comma list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return parse_list(s, "loss");
    }
    let v = parse_list(&parts.join(","), "loss")?;
    let (a, b, step) = (v[0], v[1], v[2]);
    if !(step > 0.0) || b < a {
        return Err(CliError::Usage(format!("bad loss grid {s:?}")));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + i as f64 * step).collect())
}

pub fn cmd_rates(a: &RatesArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let params = a.params.load()?;
    let eps = parse_list(&a.eps, "eps")?;
    if eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(CliError::Usage("--eps values must lie in (0, 1)".into()));
    }
    let loss = parse_grid(&a.loss_grid)?;
    let model = ChannelModel {
        base_coincidence_hz: a.coincidence_hz,
        ..ChannelModel::default()
    };
    let rows = params::ot_rate_curve(&model, &params, &eps, &loss);
    write_lines(&a.out, out, &params::rates_to_csv(&rows))?;
    // block size per epsilon, with the accumulation time at 0 dB
    let hz0 = model.channel_at(0.0).coincidence_hz;
    let mut t = String::from("eps,n0,accumulation_s_0db\n");
    for e in &eps {
        match params::n0_for_epsilon(&params, *e) {
            Some(n) => {
                let _ = writeln!(t, "{e:e},{n},{:.3}", n as f64 / hz0);
            }
            None => {
                let _ = writeln!(t, "{e:e},,");
            }
        }
    }
    // the block size actually configured, labelled instead of an epsilon
    let _ = writeln!(t, "params,{},{:.3}", params.n0, params.n0 as f64 / hz0);
    match &a.out {
        Some(p) => fs::write(n0_table_path(p), t)?,
        None => out.write_all(format!("\n{t}").as_bytes())?,
    }
    Ok(())
}

pub fn n0_table_path(p: &Path) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    p.with_file_name(format!("{stem}_n0.csv"))
}

// ---------------------------------------------------------------- match

/// Parses `run-ot` output lines back into one party's base transfers.
pub fn parse_base_ots(text: &str) -> Result<Vec<RotPair>> {
    let bad = |i: usize| CliError::Usage(format!("base OT line {} is not a run-ot output line", i + 1));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let w: Vec<&str> = l.split_whitespace().collect();
            let (w0, w1) = match w.as_slice() {
                [a, b] => (*a, *b),
                _ => return Err(bad(i)),
            };
            let bits = |h: &str| {
                let b = hex::decode(h).map_err(|_| bad(i))?;
                BitString::from_bytes(&b, b.len() * 8).ok_or_else(|| bad(i))
            };
            Ok(match w0 {
                "0" | "1" => RotPair::Receiver {
                    rc: bits(w1)?,
                    c: w0 == "1",
                },
                _ => RotPair::Sender {
                    r0: bits(w0)?,
                    r1: bits(w1)?,
                },
            })
        })
        .collect()
}

fn read_db(p: &Path) -> Result<FingerprintDb> {
    Ok(FingerprintDb::read(p)?)
}

fn match_input(a: &MatchArgs, which: Option<bool>) -> Result<MatchInput> {
    // which: Some(true) template, Some(false) db, None from flags
    let want_template = match which {
        Some(t) => t,
        None => match (&a.template, &a.db) {
            (Some(_), None) => true,
            (None, Some(_)) => false,
            _ => return Err(CliError::Usage("give exactly one of --template or --db".into())),
        },
    };
    if want_template {
        let p = a.template.as_ref().ok_or_else(|| CliError::Usage("--template is required".into()))?;
        let t = read_db(p)?;
        if t.m() != 1 {
            return Err(CliError::Usage(format!("template file holds {} rows, expected 1", t.m())));
        }
        Ok(MatchInput::Template(t.rows[0].clone()))
    } else {
        let p = a.db.as_ref().ok_or_else(|| CliError::Usage("--db is required".into()))?;
        Ok(MatchInput::Database(read_db(p)?))
    }
}

pub fn render_match(report: &MatchReport, role: MpcRole) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# role={role} m={} n={}", report.m, report.n);
    let _ = writeln!(s, "# distances are revealed to both parties; the threshold is applied in the clear");
    let _ = writeln!(s, "row,distance,match");
    for (i, (d, v)) in report.outcome.distances.iter().zip(&report.outcome.verdicts).enumerate() {
        let _ = writeln!(s, "{i},{:.9},{}", mpc::decode_distance(*d), v);
    }
    let l = &report.ledger;
    let _ = writeln!(s, "# base_ots_consumed={}", l.base_consumed);
    let _ = writeln!(s, "# extended_ots_supplied={} consumed={}", l.supplied, l.consumed);
    let _ = writeln!(
        s,
        "# multiplications={} additions={}",
        report.outcome.multiplications, report.outcome.additions
    );
    let _ = writeln!(s, "# bytes_sent={} bytes_recv={}", report.bytes_sent, report.bytes_recv);
    let _ = writeln!(
        s,
        "# secs_extend={:.3} secs_triples={:.3} secs_online={:.3}",
        report.secs_extend, report.secs_triples, report.secs_online
    );
    s
}

fn base_ots_over<T: Transport>(ep: &mut Endpoint<T>, seed: u64) -> Result<Vec<RotPair>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xBA5E);
    let mut rots = Vec::with_capacity(mpc::BASE_OTS);
    // statistical aborts hit both sides in the same session, so a retry stays in step
    for _ in 0..4 * mpc::BASE_OTS {
        if rots.len() == mpc::BASE_OTS {
            break;
        }
        let c = (ep.role() == Party::Receiver).then(|| rng.gen());
        match ep.run_ot(128, c) {
            Ok(r) => rots.push(RotPair::from(r)),
            Err(AbortReason::AuthFail) => return Err(CliError::Abort(AbortReason::AuthFail.to_string())),
            Err(_) => {}
        }
    }
    if rots.len() < mpc::BASE_OTS {
        return Err(CliError::Abort("too_many_aborts".into()));
    }
    Ok(rots)
}

pub fn cmd_match(a: &MatchArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let threshold = mpc::encode_distance(a.threshold);
    let seed = a.conn.channel.seed;
    match a.conn.transport {
        TransportKind::Tcp => {
            let role: Party = a
                .conn
                .role
                .ok_or_else(|| CliError::Usage("--role is required with --transport tcp".into()))?
                .into();
            let input = match_input(a, None)?;
            let params = a.conn.params.load()?;
            let (rots, transport): (Vec<RotPair>, Dyn) = match (&a.base_ots, a.dealer_seed) {
                (Some(p), _) => {
                    let rots = parse_base_ots(&fs::read_to_string(p)?)?;
                    let t: Dyn = match role {
                        Party::Sender => Box::new(TcpTransport::listen(&a.conn.endpoint)?),
                        Party::Receiver => {
                            Box::new(TcpTransport::connect(a.conn.endpoint.as_str(), Duration::from_secs(60))?)
                        }
                    };
                    (rots, t)
                }
                (None, Some(ds)) => {
                    let (s, r) = mpc::dealer_rots(ds, 128);
                    let t: Dyn = match role {
                        Party::Sender => Box::new(TcpTransport::listen(&a.conn.endpoint)?),
                        Party::Receiver => {
                            Box::new(TcpTransport::connect(a.conn.endpoint.as_str(), Duration::from_secs(60))?)
                        }
                    };
                    (if role == Party::Sender { s } else { r }, t)
                }
                (None, None) => {
                    let mut ep = connect_tcp(&a.conn, role, &params)?;
                    let rots = base_ots_over(&mut ep, seed)?;
                    (rots, ep.into_transport())
                }
            };
            let base = ExtBase::from_rots(&rots)?;
            let mut chan = MpcChannel::new(transport);
            let report = mpc::run_match(&mut chan, &base, OtLedger::default(), &input, threshold, seed)?;
            write_lines(&a.out, out, &render_match(&report, base.role()))
        }
        TransportKind::Loopback => {
            let tpl = match_input(a, Some(true))?;
            let db = match_input(a, Some(false))?;
            let params = a.conn.params.load()?;
            let (rs, rr, ta, tb): (Vec<RotPair>, Vec<RotPair>, Dyn, Dyn) = match a.dealer_seed {
                Some(ds) => {
                    let (s, r) = mpc::dealer_rots(ds, 128);
                    let (ta, tb) = loopback_pair();
                    (s, r, Box::new(ta), Box::new(tb))
                }
                None => {
                    if a.base_ots.is_some() {
                        return Err(CliError::Usage("--base-ots needs --transport tcp".into()));
                    }
                    let (mut s, mut r) = connect_loopback(&a.conn, Party::Sender, &params)?;
                    let (x, y) = std::thread::scope(|sc| {
                        let h = sc.spawn(|| base_ots_over(&mut s, seed));
                        let y = base_ots_over(&mut r, seed);
                        (h.join().expect("sender thread panicked"), y)
                    });
                    (x?, y?, s.into_transport(), r.into_transport())
                }
            };
            // quantum sender's view feeds the extended-OT receiver
            let (bs, br) = (ExtBase::from_rots(&rs)?, ExtBase::from_rots(&rr)?);
            let (mut ca, mut cb) = (MpcChannel::new(ta), MpcChannel::new(tb));
            let (x, y) = std::thread::scope(|sc| {
                let h = sc.spawn(|| mpc::run_match(&mut ca, &bs, OtLedger::default(), &db, threshold, seed));
                let y = mpc::run_match(&mut cb, &br, OtLedger::default(), &tpl, threshold, seed.wrapping_add(1));
                (h.join().expect("match thread panicked"), y)
            });
            let (x, y) = (x?, y?);
            debug_assert_eq!(x.outcome, y.outcome);
            let role: Party = a.conn.role.map(Into::into).unwrap_or(Party::Receiver);
            let (rep, mrole) = match role {
                Party::Sender => (&x, bs.role()),
                Party::Receiver => (&y, br.role()),
            };
            write_lines(&a.out, out, &render_match(rep, mrole))
        }
    }
}

/// Receiver output lines written by `run-ot`, for tests and tools.
pub fn parse_ot_line(line: &str) -> Option<OtResult> {
    match parse_base_ots(line).ok()?.pop()? {
        RotPair::Sender { r0, r1 } => Some(OtResult::Sender { m0: r0, m1: r1 }),
        RotPair::Receiver { rc, c } => Some(OtResult::Receiver { mc: rc, c }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exec(args: &[&str]) -> (Result<()>, String) {
        let cli = Cli::try_parse_from(std::iter::once("qot").chain(args.iter().copied())).unwrap();
        let mut buf = Vec::new();
        let r = execute(cli, &mut buf);
        (r, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn request_and_grid_parsing() {
        assert_eq!(parse_request("128x128").unwrap(), (128, 128));
        assert_eq!(parse_request("3×64").unwrap(), (3, 64));
        assert!(parse_request("0x8").is_err());
        assert!(parse_request("12").is_err());
        assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("2,4").unwrap(), vec![2.0, 4.0]);
        assert!(parse_grid("3:1:1").is_err());
        let t = parse_tamper("PAIR:0:5").unwrap();
        assert_eq!((t.tag, t.nth, t.bit), (tags::PAIR, 0, 5));
        assert!(parse_tamper("NOPE:0:1").is_err());
    }

    #[test]
    fn usage_errors_map_to_exit_2() {
        assert_eq!(run(["qot", "simulate", "--n0", "0", "--out-dir", "/tmp"]), 2);
        assert_eq!(run(["qot", "bogus"]), 2);
        assert_eq!(run(["qot", "rates", "--eps", "2"]), 2);
    }

    #[test]
    fn simulate_is_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        for d in [&d1, &d2] {
            let (r, _) = exec(&["simulate", "--n0", "5000", "--seed", "4", "--out-dir", d.path().to_str().unwrap()]);
            r.unwrap();
        }
        for f in ["block_0_sender.qraw", "block_0_receiver.qraw"] {
            let a = fs::read(d1.path().join(f)).unwrap();
            assert_eq!(a, fs::read(d2.path().join(f)).unwrap());
            assert_eq!(a.len(), 16 + 5000 / 4);
        }
        let m = fs::read_to_string(d1.path().join("manifest.txt")).unwrap();
        assert!(m.contains("n0=5000") && m.contains("coincidence_hz="));
    }

    #[test]
    fn rates_table_has_header_and_flags() {
        let (r, s) = exec(&["rates", "--eps", "1e-8", "--loss-grid", "0,10"]);
        r.unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some(params::RATE_CSV_HEADER));
        assert!(lines.next().unwrap().ends_with(",true"));
        assert!(lines.next().unwrap().ends_with(",false"));
        assert!(s.contains("eps,n0,accumulation_s_0db"));
        assert!(s.contains("\nparams,3200000,113.074"));
    }

    #[test]
    fn base_ot_lines_round_trip() {
        let s = OtResult::Sender {
            m0: BitString::from_bools(&[true; 16]),
            m1: BitString::from_bools(&[false; 16]),
        };
        let r = OtResult::Receiver {
            mc: BitString::from_bools(&[true; 16]),
            c: false,
        };
        for x in [s, r] {
            assert_eq!(parse_ot_line(&x.to_hex_line()), Some(x));
        }
        assert!(parse_base_ots("zz qq").is_err());
    }

    #[test]
    fn loopback_run_ot_smoke() {
        let (r, s) = exec(&[
            "run-ot", "--transport", "loopback", "--preset", "smoke", "--live-sim", "--qber", "0.0075", "--request",
            "2x64", "--choices-hex", "40",
        ]);
        r.unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 4);
        let pick = |l: &str| parse_ot_line(l.split_once(' ').unwrap().1).unwrap();
        for k in 0..2 {
            let (OtResult::Sender { m0, m1 }, OtResult::Receiver { mc, c }) = (pick(lines[2 * k]), pick(lines[2 * k + 1]))
            else {
                panic!("bad lines")
            };
            assert_eq!(c, k == 1);
            assert_eq!(mc, if c { m1 } else { m0 });
        }
    }

    #[test]
    fn tampered_loopback_exits_with_auth_fail() {
        let (r, _) = exec(&[
            "run-ot", "--transport", "loopback", "--preset", "smoke", "--live-sim", "--qber", "0.0075", "--request",
            "1x64", "--role", "receiver", "--tamper", "PAIR:0:3",
        ]);
        let e = r.unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert_eq!(e.to_string(), "abort: auth_fail");
    }

    #[test]
    fn dealer_match_over_loopback() {
        let d = tempfile::tempdir().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let db = FingerprintDb::from_features(&rows).unwrap();
        let tpl = FingerprintDb::new(vec![db.rows[4].clone()]).unwrap();
        let (dbp, tp) = (d.path().join("db.bin"), d.path().join("t.bin"));
        db.write(&dbp).unwrap();
        tpl.write(&tp).unwrap();
        let (r, s) = exec(&[
            "match", "--transport", "loopback", "--dealer-seed", "3", "--db", dbp.to_str().unwrap(), "--template",
            tp.to_str().unwrap(), "--threshold", "0.001",
        ]);
        r.unwrap();
        assert!(s.contains("\n4,0.000000000,true\n"), "{s}");
        assert_eq!(s.matches(",true").count(), 1);
        assert!(s.contains("consumed=12288"));
    }
}
