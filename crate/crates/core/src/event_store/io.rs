use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{EventRecord, EventWindow, GridSpec, VariableDictionary};
use crate::error::{Error, Result};

const EVENT_HEADER: [&str; 4] = ["patient_id", "time_min", "variable", "value"];
const LABEL_HEADER: [&str; 2] = ["patient_id", "label"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub grid_step: f64,
    pub t_max: f64,
    /// Patients with fewer events are dropped with a warning.
    pub min_events: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            grid_step: 60.0,
            t_max: 2880.0,
            min_events: 1,
        }
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let got = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
    if got.iter().collect::<Vec<_>>() != header {
        return Err(parse_err(
            path,
            1,
            format!("expected header {:?}, got {:?}", header.join(","), got),
        ));
    }
    Ok(rdr)
}

/// Reads an event CSV and a label CSV into one grid window per labelled
/// patient, in label-file order.
///
/// Each patient's events must form one contiguous block with nondecreasing
/// times. Patients without enough events are skipped with a warning.
pub fn load_events(
    event_csv: &Path,
    label_csv: &Path,
    dict: &VariableDictionary,
    opts: &LoadOptions,
) -> Result<Vec<EventWindow>> {
    let grid = GridSpec::new(opts.grid_step, opts.t_max, dict.len())?;

    let mut labels: Vec<(String, u8)> = Vec::new();
    let mut label_of: HashMap<String, u8> = HashMap::new();
    let mut rdr = open_csv(label_csv, &LABEL_HEADER)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(label_csv, 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let pid = rec[0].to_string();
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(label_csv, line, format!("label must be 0 or 1, got {other:?}"))),
        };
        if label_of.insert(pid.clone(), label).is_some() {
            return Err(parse_err(label_csv, line, format!("duplicate patient {pid}")));
        }
        labels.push((pid, label));
    }

    let mut events: HashMap<String, Vec<(f64, usize, f64)>> = HashMap::new();
    let mut closed: HashSet<String> = HashSet::new();
    let mut current: Option<(String, f64)> = None;
    let mut rdr = open_csv(event_csv, &EVENT_HEADER)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(event_csv, 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let pid = &rec[0];
        let time: f64 = rec[1]
            .parse()
            .map_err(|_| parse_err(event_csv, line, format!("bad time {:?}", &rec[1])))?;
        let var = dict
            .resolve(&rec[2])
            .ok_or_else(|| parse_err(event_csv, line, format!("unknown variable {:?}", &rec[2])))?;
        let value: f64 = rec[3]
            .parse()
            .map_err(|_| parse_err(event_csv, line, format!("bad value {:?}", &rec[3])))?;
        if !value.is_finite() || !time.is_finite() {
            return Err(parse_err(event_csv, line, "non-finite time or value"));
        }
        if !(0.0..=opts.t_max).contains(&time) {
            return Err(parse_err(event_csv, line, format!("time {time} outside [0, {}]", opts.t_max)));
        }
        if !label_of.contains_key(pid) {
            return Err(parse_err(event_csv, line, format!("patient {pid} has no label")));
        }

        match &mut current {
            Some((cur, last_t)) if cur == pid => {
                if time < *last_t {
                    return Err(parse_err(
                        event_csv,
                        line,
                        format!("patient {pid}: time {time} goes backwards from {last_t}"),
                    ));
                }
                *last_t = time;
            }
            _ => {
                if closed.contains(pid) {
                    return Err(parse_err(
                        event_csv,
                        line,
                        format!("patient {pid} appears in more than one block"),
                    ));
                }
                if let Some((prev, _)) = current.take() {
                    closed.insert(prev);
                }
                current = Some((pid.to_string(), time));
            }
        }
        events.entry(pid.to_string()).or_default().push((time, var, value));
    }

    let mut out = Vec::with_capacity(labels.len());
    for (pid, label) in labels {
        let evs = events.remove(&pid).unwrap_or_default();
        if evs.is_empty() || evs.len() < opts.min_events {
            log::warn!("skipping patient {pid}: {} events (minimum {})", evs.len(), opts.min_events.max(1));
            continue;
        }
        out.push(EventWindow::from_events(pid, &grid, &evs, label)?);
    }
    Ok(out)
}

pub fn write_events(path: &Path, records: &[EventRecord], dict: &VariableDictionary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", EVENT_HEADER.join(",")).map_err(io)?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.patient_id, r.time_min, dict.name(r.variable), r.value).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_labels(path: &Path, labels: &[(String, u8)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", LABEL_HEADER.join(",")).map_err(io)?;
    for (pid, y) in labels {
        writeln!(w, "{pid},{y}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One variable name per line; trailing blank lines are ignored.
pub fn read_dictionary(path: &Path) -> Result<VariableDictionary> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut names = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        names.push((i + 1, line.trim().to_string()));
    }
    while names.last().is_some_and(|(_, n)| n.is_empty()) {
        names.pop();
    }
    if let Some((line, _)) = names.iter().find(|(_, n)| n.is_empty()) {
        return Err(parse_err(path, *line as u64, "blank variable name"));
    }
    VariableDictionary::new(names.into_iter().map(|(_, n)| n).collect())
}

/// Reads `variable,group` lines into a per-variable group label. Variables
/// that are not listed get the group `other`.
pub fn read_groups(path: &Path, dict: &VariableDictionary) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut groups = vec!["other".to_string(); dict.len()];
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ln = (i + 1) as u64;
        let (var, group) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, ln, "expected variable,group"))?;
        let v = dict
            .resolve(var.trim())
            .ok_or_else(|| parse_err(path, ln, format!("unknown variable {var:?}")))?;
        let group = group.trim();
        if group.is_empty() {
            return Err(parse_err(path, ln, "empty group label"));
        }
        groups[v] = group.to_string();
    }
    Ok(groups)
}
