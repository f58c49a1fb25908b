//! Reference model server for the `hshap/1` stdio protocol, used by the
//! bridge tests and handy for trying the CLI without a real model.
//!
//! ```text
//! hshap-mock-server echo [options]
//! hshap-mock-server mil --image X.ppm --mask M.pgm [options]
//! ```
//!
//! `echo` scores a sample by the mean of its values (head `h` adds `h`).
//! `mil` scores 1 when any pixel marked in the mask still holds its value
//! from the image, else 0 (head `h` of a two-output server returns the
//! complement for `h = 1`).
//!
//! Options: `--outputs N`, `--nested` (reply with every head), `--pipelining`
//! (advertise it and answer queued requests in reverse order),
//! `--delay-ms D`, `--protocol P`, `--record FILE` (append received lines),
//! `--silent` (never handshake), and fault injection with `--crash-after K`,
//! `--error-on K`, `--wrong-id`, `--garbage`.

use std::io::{BufRead, BufWriter, Write};
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Duration;

use hshap::imageio::{load_pgm, load_ppm};
use serde_json::{json, Value};

#[derive(Default)]
struct Options {
    mil: Option<(Vec<f64>, Vec<bool>, usize)>,
    outputs: usize,
    nested: bool,
    pipelining: bool,
    delay: Duration,
    protocol: String,
    record: Option<std::fs::File>,
    silent: bool,
    crash_after: Option<u64>,
    error_on: Option<u64>,
    wrong_id: bool,
    garbage: bool,
}

fn parse_args() -> Result<Options, String> {
    let mut args = std::env::args().skip(1);
    let mode = args.next().ok_or("missing mode (echo or mil)")?;
    let mut o = Options { outputs: 1, protocol: "hshap/1".into(), ..Default::default() };
    let (mut image, mut mask) = (None, None);
    while let Some(a) = args.next() {
        let mut value = |name: &str| args.next().ok_or(format!("{name} needs a value"));
        match a.as_str() {
            "--image" => image = Some(value("--image")?),
            "--mask" => mask = Some(value("--mask")?),
            "--outputs" => o.outputs = value("--outputs")?.parse().map_err(|e| format!("--outputs: {e}"))?,
            "--nested" => o.nested = true,
            "--pipelining" => o.pipelining = true,
            "--delay-ms" => {
                let ms: u64 = value("--delay-ms")?.parse().map_err(|e| format!("--delay-ms: {e}"))?;
                o.delay = Duration::from_millis(ms);
            }
            "--protocol" => o.protocol = value("--protocol")?,
            "--record" => {
                let path = value("--record")?;
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| format!("{path}: {e}"))?;
                o.record = Some(f);
            }
            "--silent" => o.silent = true,
            "--crash-after" => o.crash_after = Some(value("--crash-after")?.parse().map_err(|e| format!("{e}"))?),
            "--error-on" => o.error_on = Some(value("--error-on")?.parse().map_err(|e| format!("{e}"))?),
            "--wrong-id" => o.wrong_id = true,
            "--garbage" => o.garbage = true,
            other => return Err(format!("unknown option {other}")),
        }
    }
    match mode.as_str() {
        "echo" => {}
        "mil" => {
            let image = load_ppm(image.ok_or("mil mode needs --image")?).map_err(|e| e.to_string())?;
            let mask = load_pgm(mask.ok_or("mil mode needs --mask")?).map_err(|e| e.to_string())?;
            let shape = image.shape();
            if (mask.height, mask.width) != (shape.height, shape.width) {
                return Err("mask and image sizes differ".into());
            }
            o.mil = Some((image.into_vec(), mask.to_mask(), shape.features()));
        }
        other => return Err(format!("unknown mode {other}")),
    }
    if o.outputs == 0 {
        return Err("--outputs must be positive".into());
    }
    Ok(o)
}

impl Options {
    fn score(&self, sample: &[f64]) -> f64 {
        match &self.mil {
            None => sample.iter().sum::<f64>() / sample.len().max(1) as f64,
            Some((image, important, features)) => {
                let channels = image.len() / features;
                let hit = important.iter().enumerate().any(|(i, &imp)| {
                    imp && (0..channels).all(|c| sample.get(c * features + i) == Some(&image[c * features + i]))
                });
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn head_value(&self, base: f64, head: usize) -> f64 {
        match (&self.mil, head) {
            (_, 0) => base,
            (Some(_), _) => 1.0 - base,
            (None, h) => base + h as f64,
        }
    }

    fn reply(&self, seq: u64, line: &str) -> Option<String> {
        if self.garbage {
            return Some("this is not json".into());
        }
        let request: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return Some(json!({"id": 0, "error": format!("bad request: {e}")}).to_string()),
        };
        let id = request["id"].as_u64().unwrap_or(0);
        let reply_id = if self.wrong_id { id + 1000 } else { id };
        if self.error_on == Some(seq) {
            return Some(json!({"id": reply_id, "error": "injected failure"}).to_string());
        }
        let head = request["head"].as_u64().unwrap_or(0) as usize;
        if head >= self.outputs {
            return Some(json!({"id": reply_id, "error": format!("no head {head}")}).to_string());
        }
        let Some(batch) = request["batch"].as_array() else {
            return Some(json!({"id": reply_id, "error": "missing batch"}).to_string());
        };
        let scores: Vec<Value> = batch
            .iter()
            .map(|s| {
                let sample: Vec<f64> = s.as_array().map(|a| a.iter().filter_map(Value::as_f64).collect()).unwrap_or_default();
                let base = self.score(&sample);
                if self.nested {
                    json!((0..self.outputs).map(|h| self.head_value(base, h)).collect::<Vec<_>>())
                } else {
                    json!(self.head_value(base, head))
                }
            })
            .collect();
        Some(json!({"id": reply_id, "scores": scores}).to_string())
    }
}

fn main() -> ExitCode {
    let mut options = match parse_args() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("hshap-mock-server: {e}");
            return ExitCode::from(2);
        }
    };
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    if options.silent {
        // swallow input without ever answering
        for _ in std::io::stdin().lock().lines() {}
        return ExitCode::SUCCESS;
    }
    let mut handshake = json!({"protocol": options.protocol, "outputs": options.outputs});
    if options.pipelining {
        handshake["pipelining"] = json!(true);
    }
    writeln!(out, "{handshake}").and_then(|_| out.flush()).ok();

    let (tx, rx) = mpsc::channel::<String>();
    std::thread::spawn(move || {
        for line in std::io::stdin().lock().lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    let mut seq = 0u64;
    while let Ok(first) = rx.recv() {
        let mut queue = vec![first];
        if options.pipelining {
            // collect whatever else is in flight, then answer newest first
            while let Ok(more) = rx.recv_timeout(Duration::from_millis(20)) {
                queue.push(more);
            }
            queue.reverse();
        }
        for line in queue {
            seq += 1;
            if let Some(f) = options.record.as_mut() {
                writeln!(f, "{line}").ok();
            }
            if options.crash_after.is_some_and(|k| seq > k) {
                return ExitCode::from(1);
            }
            if !options.delay.is_zero() {
                std::thread::sleep(options.delay);
            }
            if let Some(reply) = options.reply(seq, &line) {
                if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
                    return ExitCode::SUCCESS;
                }
            }
        }
    }
    ExitCode::SUCCESS
}
