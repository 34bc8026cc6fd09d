//! `asa`: operator client for the manager's HTTP API.
//!
//! A thin client. Every check lives server-side so this tool and the
//! dashboard can never disagree; the CLI only reads files, shapes request
//! bodies and renders replies.

pub mod client;
pub mod sse;

use std::io::Write;
use std::path::{Path, PathBuf};

use asa_core::analysis::{self, BatchSummary};
use asa_core::canonical;
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde_json::{json, Value};

pub use client::{Api, CliError};

#[derive(Debug, Parser)]
#[command(name = "asa", version, about = "Command-line client for the simulation manager")]
pub struct Cli {
    /// Manager HTTP address.
    #[arg(long, env = "ASA_MANAGER", default_value = "http://127.0.0.1:8080", global = true)]
    pub manager: String,
    /// Print canonical JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scenario catalog.
    #[command(subcommand)]
    Scenario(CatalogOp),
    /// Template catalog.
    #[command(subcommand)]
    Template(CatalogOp),
    #[command(subcommand)]
    Batch(BatchOp),
    #[command(subcommand)]
    Run(RunOp),
    /// Compute metrics over a batch's stored records.
    Analyze(AnalyzeArgs),
    /// List worker nodes.
    Nodes,
}

#[derive(Debug, Subcommand)]
pub enum CatalogOp {
    /// Store a JSON document; the id defaults to its `name`.
    Add {
        file: PathBuf,
        #[arg(long)]
        id: Option<String>,
    },
    Get {
        id: String,
    },
    List {
        #[arg(long, default_value = "")]
        prefix: String,
    },
    Rm {
        id: String,
        /// Only delete if the entry is still at this revision.
        #[arg(long)]
        revision: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BatchOp {
    Submit(SubmitArgs),
    Show { id: String },
    List,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("design").required(true).args(["bindings", "factorial", "lhs"])))]
pub struct SubmitArgs {
    /// Template id.
    #[arg(long)]
    pub template: String,
    /// JSON array of binding objects, one per run.
    #[arg(long)]
    pub bindings: Option<PathBuf>,
    /// JSON array of `{name, values}` factors.
    #[arg(long)]
    pub factorial: Option<PathBuf>,
    /// Latin hypercube with this many samples over `--ranges`.
    #[arg(long, requires = "ranges")]
    pub lhs: Option<usize>,
    /// JSON array of `{name, lo, hi}`.
    #[arg(long, requires = "lhs")]
    pub ranges: Option<PathBuf>,
    /// Batch seed; every run seed derives from it.
    #[arg(long)]
    pub seed: u64,
    /// Seed of the hypercube sampler; defaults to `--seed`.
    #[arg(long, requires = "lhs")]
    pub design_seed: Option<u64>,
    /// Initial pacing of every run (0 runs unpaced).
    #[arg(long, default_value_t = 0.0)]
    pub speed: f64,
}

#[derive(Debug, Subcommand)]
pub enum RunOp {
    List {
        #[arg(long)]
        batch: Option<String>,
        /// e.g. RUNNING, COMPLETED.
        #[arg(long)]
        state: Option<String>,
    },
    Show {
        id: String,
    },
    Control {
        id: String,
        #[command(subcommand)]
        action: ControlOp,
    },
    /// Follow a run's stream and print its state changes until it ends.
    Watch {
        id: String,
    },
}

#[derive(Debug, Clone, Subcommand)]
pub enum ControlOp {
    Play,
    Pause,
    Resume,
    Stop,
    /// Pacing factor; 0 runs unpaced.
    Speed {
        factor: f64,
    },
    /// Change one agent parameter; VALUE is JSON, or a bare string.
    Set {
        agent: String,
        path: String,
        value: String,
    },
}

impl ControlOp {
    pub fn body(&self) -> Value {
        match self {
            ControlOp::Play => json!({"command": "play"}),
            ControlOp::Pause => json!({"command": "pause"}),
            ControlOp::Resume => json!({"command": "resume"}),
            ControlOp::Stop => json!({"command": "stop"}),
            ControlOp::Speed { factor } => json!({"command": "set_speed", "factor": factor}),
            ControlOp::Set { agent, path, value } => {
                let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.clone()));
                json!({"command": "set_param", "agent_id": agent, "param_path": path, "value": value})
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub batch: String,
    /// JSON array of metric specs (or an object with a `metrics` array).
    #[arg(long)]
    pub metrics: PathBuf,
    /// Write the per-run table here as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` and runs it. Returns the process exit code; all output
/// goes to `out` and `err`.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            report(&e, err);
            e.exit_code()
        }
    }
}

fn report(e: &CliError, err: &mut dyn Write) {
    let _ = match e {
        CliError::Server { status, body } => writeln!(err, "error: manager returned {status}\n{body}"),
        other => writeln!(err, "error: {other}"),
    };
}

struct Ctx<'a> {
    api: Api,
    json: bool,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn print(&mut self, text: impl AsRef<str>) -> Result<(), CliError> {
        writeln!(self.out, "{}", text.as_ref()).map_err(|e| CliError::Usage(format!("cannot write output: {e}")))
    }

    fn print_json(&mut self, v: &Value) -> Result<(), CliError> {
        self.print(canonical::to_string(v))
    }

    /// JSON mode prints `v`; otherwise `human` renders it.
    fn emit(&mut self, v: &Value, human: impl FnOnce(&Value) -> String) -> Result<(), CliError> {
        if self.json {
            self.print_json(v)
        } else {
            let text = human(v);
            self.print(text.trim_end())
        }
    }
}

fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut cx = Ctx { api: Api::new(&cli.manager)?, json: cli.json, out };
    match &cli.command {
        Command::Scenario(op) => catalog(&mut cx, "scenario", "/scenarios", op),
        Command::Template(op) => catalog(&mut cx, "template", "/templates", op),
        Command::Batch(op) => batch(&mut cx, op),
        Command::Run(op) => run_op(&mut cx, op),
        Command::Analyze(args) => analyze(&mut cx, args),
        Command::Nodes => {
            let v = cx.api.get("/nodes")?.body;
            cx.emit(&v, nodes_table)?;
            Ok(0)
        }
    }
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{} is not JSON: {e}", path.display())))
}

/// Percent-encodes a path segment or query value.
fn enc(s: &str) -> String {
    let mut o = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            o.push(b as char);
        } else {
            o.push_str(&format!("%{b:02X}"));
        }
    }
    o
}

fn catalog(cx: &mut Ctx, what: &str, base: &str, op: &CatalogOp) -> Result<i32, CliError> {
    match op {
        CatalogOp::Add { file, id } => {
            let body = read_json(file)?;
            let path = match id {
                Some(id) => format!("{base}?id={}", enc(id)),
                None => base.to_owned(),
            };
            let v = cx.api.post(&path, &body)?.body;
            cx.emit(&v, |v| format!("created {what} `{}` at revision {}", str_of(&v["id"]), v["revision"]))?;
        }
        CatalogOp::Get { id } => {
            let v = cx.api.get(&format!("{base}/{}", enc(id)))?.body;
            cx.emit(&v, |v| canonical::to_string_pretty(&v["body"]))?;
        }
        CatalogOp::List { prefix } => {
            let v = cx.api.get(&format!("{base}?prefix={}", enc(prefix)))?.body;
            cx.emit(&v, |v| {
                let rows = items(v)
                    .iter()
                    .map(|e| vec![str_of(&e["id"]), e["revision"].to_string(), str_of(&e["body"]["name"])])
                    .collect();
                table(&["ID", "REVISION", "NAME"], rows)
            })?;
        }
        CatalogOp::Rm { id, revision } => {
            let v = cx.api.delete(&format!("{base}/{}", enc(id)), *revision)?.body;
            cx.emit(&v, |v| format!("deleted {what} `{}`", str_of(&v["id"])))?;
        }
    }
    Ok(0)
}

fn batch(cx: &mut Ctx, op: &BatchOp) -> Result<i32, CliError> {
    match op {
        BatchOp::Submit(a) => {
            let mut body = json!({"template_id": a.template, "seed": a.seed, "speed_factor": a.speed});
            if let Some(f) = &a.bindings {
                body["bindings"] = read_json(f)?;
            } else if let Some(f) = &a.factorial {
                body["doe"] = json!({"full_factorial": read_json(f)?});
            } else if let (Some(n), Some(f)) = (a.lhs, &a.ranges) {
                let seed = a.design_seed.unwrap_or(a.seed);
                body["doe"] = json!({"latin_hypercube": {"n": n, "ranges": read_json(f)?, "seed": seed}});
            }
            let v = cx.api.post("/batches", &body)?.body;
            cx.emit(&v, |v| {
                let runs: Vec<String> = items(&v["run_ids"]).iter().map(str_of).collect();
                format!("submitted batch {} with {} runs\n{}", str_of(&v["batch_id"]), runs.len(), runs.join("\n"))
            })?;
        }
        BatchOp::Show { id } => {
            let v = cx.api.get(&format!("/batches/{}", enc(id)))?.body;
            cx.emit(&v, batch_text)?;
        }
        BatchOp::List => {
            let v = cx.api.get("/batches")?.body;
            cx.emit(&v, |v| {
                let rows = items(v)
                    .iter()
                    .map(|b| {
                        vec![
                            str_of(&b["batch_id"]),
                            str_of(&b["template_id"]),
                            items(&b["run_ids"]).len().to_string(),
                            rollup_text(&b["rollup"]),
                        ]
                    })
                    .collect();
                table(&["BATCH", "TEMPLATE", "RUNS", "STATES"], rows)
            })?;
        }
    }
    Ok(0)
}

fn run_op(cx: &mut Ctx, op: &RunOp) -> Result<i32, CliError> {
    match op {
        RunOp::List { batch, state } => {
            let mut q = Vec::new();
            if let Some(b) = batch {
                q.push(format!("batch_id={}", enc(b)));
            }
            if let Some(s) = state {
                q.push(format!("state={}", enc(&s.to_ascii_uppercase())));
            }
            let path = if q.is_empty() { "/runs".to_owned() } else { format!("/runs?{}", q.join("&")) };
            let v = cx.api.get(&path)?.body;
            cx.emit(&v, runs_table)?;
            Ok(0)
        }
        RunOp::Show { id } => {
            let v = cx.api.get(&format!("/runs/{}", enc(id)))?.body;
            cx.emit(&v, run_text)?;
            Ok(0)
        }
        RunOp::Control { id, action } => {
            let reply = cx.api.post(&format!("/runs/{}/control", enc(id)), &action.body())?;
            let pending = reply.status == reqwest::StatusCode::ACCEPTED;
            cx.emit(&reply.body, |v| {
                let note = if pending { " (node has not confirmed yet)" } else { "" };
                format!("{} {}{note}", str_of(&v["run_id"]), str_of(&v["state"]))
            })?;
            Ok(0)
        }
        RunOp::Watch { id } => watch(cx, id),
    }
}

/// Prints each state change; exits 2 if the run ends FAILED.
fn watch(cx: &mut Ctx, id: &str) -> Result<i32, CliError> {
    let mut last: Option<String> = None;
    let mut end: Option<Value> = None;
    let mut out_err: Option<CliError> = None;
    let json = cx.json;
    {
        let Ctx { api, out, .. } = cx;
        api.stream(&format!("/runs/{}/stream", enc(id)), |ev| {
            let data: Value = serde_json::from_str(&ev.data).unwrap_or(Value::Null);
            let line = match ev.event.as_str() {
                "state" | "end" => {
                    let state = str_of(&data["state"]);
                    let changed = last.as_deref() != Some(state.as_str());
                    last = Some(state.clone());
                    if ev.event == "end" {
                        end = Some(data.clone());
                    }
                    match (changed, json) {
                        (false, _) => None,
                        (true, true) => Some(canonical::to_string(&json!({"run_id": data["run_id"], "state": state}))),
                        (true, false) => Some(state_line(&data)),
                    }
                }
                "reset" if !json => Some(format!("attempt {} started over", data["attempt"])),
                _ => None,
            };
            if let Some(l) = line {
                if let Err(e) = writeln!(out, "{l}").and_then(|_| out.flush()) {
                    out_err = Some(CliError::Usage(format!("cannot write output: {e}")));
                    return false;
                }
            }
            end.is_none()
        })?;
    }
    if let Some(e) = out_err {
        return Err(e);
    }
    match end {
        Some(v) if v["state"] == "FAILED" => Ok(2),
        Some(_) => Ok(0),
        None => Err(CliError::Transport("stream closed before the run ended".into())),
    }
}

fn analyze(cx: &mut Ctx, a: &AnalyzeArgs) -> Result<i32, CliError> {
    let metrics = match read_json(&a.metrics)? {
        Value::Array(m) => Value::Array(m),
        Value::Object(mut o) if o.contains_key("metrics") => o.remove("metrics").unwrap_or_default(),
        _ => return Err(CliError::Usage(format!("{}: expected an array of metric specs", a.metrics.display()))),
    };
    let v = cx.api.post(&format!("/batches/{}/analyze", enc(&a.batch)), &json!({"metrics": metrics}))?.body;
    if let Some(path) = &a.out {
        let summary: BatchSummary =
            serde_json::from_value(v.clone()).map_err(|e| CliError::Transport(format!("unreadable analysis: {e}")))?;
        analysis::export_csv(&summary.runs, path)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    }
    cx.emit(&v, summary_text)?;
    Ok(0)
}

// ---- rendering ----

fn items(v: &Value) -> &[Value] {
    v.as_array().map(Vec::as_slice).unwrap_or_default()
}

fn str_of(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => canonical::to_string(other),
    }
}

fn num(v: &Value) -> String {
    match v.as_f64() {
        Some(x) if v.is_f64() => format!("{x:.4}"),
        _ => str_of(v),
    }
}

/// Left-aligned columns separated by two spaces.
pub fn table(headers: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_owned() + "\n"
    };
    let mut s = line(headers.iter().map(|h| h.to_string()).collect());
    for r in rows {
        s += &line(r);
    }
    s
}

fn rollup_text(r: &Value) -> String {
    match r.as_object() {
        Some(o) if !o.is_empty() => o.iter().map(|(k, n)| format!("{k}={n}")).collect::<Vec<_>>().join(" "),
        _ => "-".into(),
    }
}

fn progress(r: &Value) -> String {
    match (r["progress_step"].as_u64(), r["max_steps"].as_u64()) {
        (Some(p), Some(m)) => format!("{p}/{m}"),
        _ => "-".into(),
    }
}

fn runs_table(v: &Value) -> String {
    let rows = items(v)
        .iter()
        .map(|r| {
            vec![
                str_of(&r["run_id"]),
                str_of(&r["state"]),
                str_of(&r["node_id"]),
                r["attempts"].to_string(),
                progress(r),
            ]
        })
        .collect();
    table(&["RUN", "STATE", "NODE", "ATTEMPTS", "STEP"], rows)
}

fn run_text(r: &Value) -> String {
    let mut s = String::new();
    for (k, v) in [
        ("run", str_of(&r["run_id"])),
        ("batch", str_of(&r["batch_id"])),
        ("state", str_of(&r["state"])),
        ("node", str_of(&r["node_id"])),
        ("attempts", r["attempts"].to_string()),
        ("seed", r["seed"].to_string()),
        ("step", progress(r)),
    ] {
        s += &format!("{k:<9}{v}\n");
    }
    if !r["detail"].is_null() {
        s += &format!("{:<9}{}\n", "detail", str_of(&r["detail"]));
    }
    s
}

fn state_line(r: &Value) -> String {
    let mut s = format!("{} {}", str_of(&r["run_id"]), str_of(&r["state"]));
    if let Some(p) = r["progress_step"].as_u64() {
        s += &format!(" at step {p}");
    }
    if !r["detail"].is_null() {
        s += &format!(": {}", str_of(&r["detail"]));
    }
    s
}

fn batch_text(b: &Value) -> String {
    format!(
        "batch     {}\ntemplate  {} (revision {})\nseed      {}\nruns      {}\nstates    {}\ncomplete  {}\n",
        str_of(&b["batch_id"]),
        str_of(&b["template_id"]),
        b["template_revision"],
        b["batch_seed"],
        items(&b["run_ids"]).len(),
        rollup_text(&b["rollup"]),
        b["complete"],
    )
}

fn nodes_table(v: &Value) -> String {
    let rows = items(v)
        .iter()
        .map(|n| {
            vec![
                str_of(&n["node_id"]),
                str_of(&n["status"]),
                format!("{}/{}", items(&n["running"]).len(), n["capacity"]),
                str_of(&n["address"]),
            ]
        })
        .collect();
    table(&["NODE", "STATUS", "LOAD", "ADDRESS"], rows)
}

fn summary_text(v: &Value) -> String {
    let mut rows = Vec::new();
    if let Some(metrics) = v["metrics"].as_object() {
        for (name, m) in metrics {
            let ci = match m["ci95"].as_array() {
                Some(c) if c.len() == 2 => format!("[{}, {}]", num(&c[0]), num(&c[1])),
                _ => "-".into(),
            };
            rows.push(vec![
                name.clone(),
                m["n"].to_string(),
                m["undefined"].to_string(),
                num(&m["mean"]),
                num(&m["std"]),
                num(&m["min"]),
                num(&m["max"]),
                ci,
            ]);
        }
    }
    let mut s = format!("analysis {}\n", str_of(&v["analysis_id"]));
    s += &table(&["METRIC", "N", "UNDEFINED", "MEAN", "STD", "MIN", "MAX", "CI95"], rows);
    for w in items(&v["warnings"]) {
        s += &format!("warning: {}\n", str_of(w));
    }
    s
}
