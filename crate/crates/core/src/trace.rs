//! Line-delimited logit traces.
//!
//! A trace stores, per scored decode position, the top-k `(token, logit)`
//! pairs and optionally the token a drafter proposed there. Traces recorded
//! from a live decode replay to the same verification decisions; traces
//! dumped by an external inference stack feed the distributional analysis.
//!
//! Format (UTF-8, every line terminated by `\n`, fields separated by a
//! single `\t`):
//!
//! ```text
//! MARS-TRACE <TAB> 1 <TAB> vocab=<V> <TAB> producer=<escaped string>
//! <step> <TAB> <ctx> <TAB> <temperature> <TAB> <draft> <TAB> <id>:<logit>,<id>:<logit>[,...]
//! ```
//!
//! * `step`: decimal u64 decode position.
//! * `ctx`: 16 lowercase hex digits (context hash) or `-`.
//! * `temperature`: positive finite float.
//! * `draft`: decimal token id or `-` when no draft was proposed.
//! * top-k list: at least 2 entries, ids below V, finite logits, strictly
//!   ordered by descending logit with ascending id among equal logits, no
//!   repeated ids.
//!
//! Writers emit floats as `{:.16e}` (17 significant digits) so every f64
//! round-trips bit-exactly; readers accept any Rust-parsable float. In the
//! producer string every byte that is `%`, ASCII whitespace or an ASCII
//! control character is written as `%XX` (uppercase hex).
//!
//! Replay groups records into cycles: K consecutive records carrying a draft
//! form one cycle, and a draft-less record directly after them supplies the
//! bonus token. Other draft-less records are analysis-only.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::engine::{CostModel, CycleTally, DecodeMetrics};
use crate::error::{Error, Result};
use crate::logit::{TokenId, TopTwo};
use crate::verify::{verify_positions, CycleResult, VerificationPolicy};

pub const MAGIC: &str = "MARS-TRACE";
pub const FORMAT_VERSION: u32 = 1;
/// Number of candidates recorded per position by the built-in recorder.
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub context_hash: Option<u64>,
    pub top_k: Vec<(TokenId, f64)>,
    pub chosen_draft: Option<TokenId>,
    pub temperature: f64,
}

impl TraceRecord {
    pub fn validate(&self, vocab_size: usize) -> std::result::Result<(), String> {
        if self.top_k.len() < 2 {
            return Err(format!(
                "top-k list has {} entries, at least 2 are required",
                self.top_k.len()
            ));
        }
        let mut seen = HashSet::with_capacity(self.top_k.len());
        for &(id, z) in &self.top_k {
            if id.index() >= vocab_size {
                return Err(format!(
                    "token {id} is outside the vocabulary of size {vocab_size}"
                ));
            }
            if !z.is_finite() {
                return Err(format!("logit of token {id} is not finite"));
            }
            if !seen.insert(id) {
                return Err(format!("token {id} appears twice in the top-k list"));
            }
        }
        for (i, pair) in self.top_k.windows(2).enumerate() {
            let ((a, za), (b, zb)) = (pair[0], pair[1]);
            if !(za > zb || (za == zb && a < b)) {
                return Err(format!(
                    "top-k entries {i} ({a}:{za}) and {} ({b}:{zb}) are not in descending order",
                    i + 1
                ));
            }
        }
        if let Some(d) = self.chosen_draft {
            if d.index() >= vocab_size {
                return Err(format!(
                    "draft token {d} is outside the vocabulary of size {vocab_size}"
                ));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        Ok(())
    }

    /// Top-2 statistics from the first two entries.
    pub fn top_two(&self) -> Result<TopTwo> {
        let (v1, z1) = self.top_k[0];
        let (v2, z2) = self.top_k[1];
        TopTwo::from_ranked(v1, z1, v2, z2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: u32,
    pub vocab_size: usize,
    pub producer: String,
}

impl TraceHeader {
    pub fn new(vocab_size: usize, producer: impl Into<String>) -> Self {
        Self {
            version: FORMAT_VERSION,
            vocab_size,
            producer: producer.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn escape_producer(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c == '%' || c.is_ascii_whitespace() || c.is_ascii_control() {
            out.push_str(&format!("%{:02X}", c as u32));
        } else {
            out.push(c);
        }
    }
    out
}

fn unescape_producer(s: &str) -> std::result::Result<String, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s
                .get(i + 1..i + 3)
                .ok_or_else(|| "truncated %-escape in producer".to_string())?;
            let b = u8::from_str_radix(hex, 16)
                .map_err(|_| format!("invalid %-escape %{hex} in producer"))?;
            out.push(b);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).map_err(|_| "producer is not valid UTF-8".to_string())
}

fn format_record(r: &TraceRecord) -> String {
    let ctx = r
        .context_hash
        .map_or_else(|| "-".to_string(), |h| format!("{h:016x}"));
    let draft = r
        .chosen_draft
        .map_or_else(|| "-".to_string(), |d| d.to_string());
    let top: Vec<String> = r
        .top_k
        .iter()
        .map(|(id, z)| format!("{id}:{}", format_float(*z)))
        .collect();
    format!(
        "{}\t{ctx}\t{}\t{draft}\t{}",
        r.step,
        format_float(r.temperature),
        top.join(",")
    )
}

/// Writes a trace to any sink. Records are validated first.
pub fn write_trace_to<W: Write>(
    mut sink: W,
    header: &TraceHeader,
    records: &[TraceRecord],
) -> Result<()> {
    if header.version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "cannot write version {}",
            header.version
        )));
    }
    for (i, r) in records.iter().enumerate() {
        r.validate(header.vocab_size)
            .map_err(|message| Error::Validation {
                line: i + 2,
                record: Some(i),
                message,
            })?;
    }
    let mut emit = || -> std::io::Result<()> {
        writeln!(
            sink,
            "{MAGIC}\t{}\tvocab={}\tproducer={}",
            header.version,
            header.vocab_size,
            escape_producer(&header.producer)
        )?;
        for r in records {
            writeln!(sink, "{}", format_record(r))?;
        }
        sink.flush()
    };
    emit().map_err(|e| Error::io("<trace>", e))
}

fn with_path(path: &Path, err: Error) -> Error {
    match err {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

pub fn write_trace(path: &Path, header: &TraceHeader, records: &[TraceRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_to(BufWriter::new(file), header, records).map_err(|e| with_path(path, e))
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace_from(BufReader::new(file)).map_err(|e| with_path(path, e))
}
fn parse_header(line: &str) -> Result<TraceHeader> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.first() != Some(&MAGIC) {
        return Err(Error::UnsupportedFormat(format!(
            "missing {MAGIC} header line"
        )));
    }
    let version: u32 = fields
        .get(1)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::UnsupportedFormat("header has no numeric version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    let header_err = |message: String| Error::Validation {
        line: 1,
        record: None,
        message,
    };
    if fields.len() != 4 {
        return Err(header_err(format!(
            "header has {} fields, expected 4",
            fields.len()
        )));
    }
    let vocab_size = fields[2]
        .strip_prefix("vocab=")
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 2)
        .ok_or_else(|| header_err(format!("bad vocab field {:?}", fields[2])))?;
    let producer = fields[3]
        .strip_prefix("producer=")
        .ok_or_else(|| header_err(format!("bad producer field {:?}", fields[3])))
        .and_then(|p| unescape_producer(p).map_err(header_err))?;
    Ok(TraceHeader {
        version,
        vocab_size,
        producer,
    })
}

fn parse_float(s: &str, what: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>()
        .map_err(|_| format!("{what} {s:?} is not a number"))
}

fn parse_token(s: &str, what: &str) -> std::result::Result<TokenId, String> {
    s.parse::<u32>()
        .map(TokenId)
        .map_err(|_| format!("{what} {s:?} is not a token id"))
}

fn parse_record(line: &str) -> std::result::Result<TraceRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!("record has {} fields, expected 5", fields.len()));
    }
    let step = fields[0]
        .parse::<u64>()
        .map_err(|_| format!("step {:?} is not an unsigned integer", fields[0]))?;
    let context_hash = match fields[1] {
        "-" => None,
        h if h.len() == 16 => {
            Some(u64::from_str_radix(h, 16).map_err(|_| format!("context hash {h:?} is not hex"))?)
        }
        h => return Err(format!("context hash {h:?} must be 16 hex digits or '-'")),
    };
    let temperature = parse_float(fields[2], "temperature")?;
    let chosen_draft = match fields[3] {
        "-" => None,
        d => Some(parse_token(d, "draft token")?),
    };
    let top_k = fields[4]
        .split(',')
        .map(|entry| {
            let (id, z) = entry
                .split_once(':')
                .ok_or_else(|| format!("top-k entry {entry:?} is not id:logit"))?;
            Ok((parse_token(id, "top-k token")?, parse_float(z, "logit")?))
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    Ok(TraceRecord {
        step,
        context_hash,
        top_k,
        chosen_draft,
        temperature,
    })
}

/// Parses and validates a trace. Errors carry 1-based line numbers and
/// 0-based record indices.
pub fn read_trace_from<R: BufRead>(source: R) -> Result<TraceFile> {
    let io_err = |e| Error::io("<trace>", e);
    let mut lines = source.lines();
    let header = match lines.next() {
        Some(line) => parse_header(&line.map_err(io_err)?)?,
        None => return Err(Error::UnsupportedFormat("empty trace (no header)".into())),
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        let validation = |message| Error::Validation {
            line: i + 2,
            record: Some(i),
            message,
        };
        let record = parse_record(&line).map_err(validation)?;
        record.validate(header.vocab_size).map_err(validation)?;
        records.push(record);
    }
    Ok(TraceFile { header, records })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub metrics: DecodeMetrics,
    pub cycles: Vec<CycleResult>,
}

/// Re-runs verification over the cycles recorded in `trace`.
pub fn replay_verify(
    trace: &TraceFile,
    policy: VerificationPolicy,
    k: usize,
    cost: &CostModel,
) -> Result<ReplayOutcome> {
    policy.validate()?;
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let records = &trace.records;
    let mut window: Vec<&TraceRecord> = Vec::with_capacity(k);
    let mut cycles = Vec::new();
    let mut tally = CycleTally::default();
    let mut i = 0;
    while i < records.len() {
        let record = &records[i];
        i += 1;
        if record.chosen_draft.is_none() {
            window.clear();
            continue;
        }
        window.push(record);
        if window.len() < k {
            continue;
        }
        let bonus = match records.get(i) {
            Some(next) if next.chosen_draft.is_none() => {
                i += 1;
                Some(next.top_k[0].0)
            }
            _ => None,
        };
        let draft: Vec<TokenId> = window.iter().filter_map(|r| r.chosen_draft).collect();
        let positions = window
            .iter()
            .map(|r| r.top_two())
            .collect::<Result<Vec<_>>>()?;
        let cycle = verify_positions(&draft, &positions, bonus, policy)?;
        tally.add(&cycle, k);
        cycles.push(cycle);
        window.clear();
    }
    if cycles.is_empty() {
        return Err(Error::invalid(format!(
            "trace holds no complete cycle of {k} drafted positions"
        )));
    }
    Ok(ReplayOutcome {
        metrics: tally.finish(k, cost, None)?,
        cycles,
    })
}
