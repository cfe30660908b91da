//! Metrics over prediction logs and the three result tables.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{BinaryKind, BinaryLabel, MurmurClass};
use crate::audio_lm::argmax;
use crate::tasks::{McItem, TaskId};

/// Marker printed where a metric is undefined.
pub const UNDEFINED: &str = "--";
pub const REFERENCE_NOTE: &str = "reference, not reproduced";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegMode {
    #[serde(rename = "NS")]
    Ns,
    #[serde(rename = "WS")]
    Ws,
}

impl fmt::Display for SegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegMode::Ns => "NS",
            SegMode::Ws => "WS",
        })
    }
}

impl FromStr for SegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ns" => Ok(SegMode::Ns),
            "ws" => Ok(SegMode::Ws),
            _ => Err(Error::InvalidInput(format!("unknown segmentation mode `{s}` (expected ns or ws)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDataset {
    CircorTest,
    Cinc2016,
    PascalA,
    PascalB,
}

impl EvalDataset {
    pub const ALL: [EvalDataset; 4] = [
        EvalDataset::CircorTest,
        EvalDataset::Cinc2016,
        EvalDataset::PascalA,
        EvalDataset::PascalB,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalDataset::CircorTest => "circor_test",
            EvalDataset::Cinc2016 => "cinc2016",
            EvalDataset::PascalA => "pascal_a",
            EvalDataset::PascalB => "pascal_b",
        }
    }

    pub fn binary_kind(self) -> Option<BinaryKind> {
        match self {
            EvalDataset::CircorTest => None,
            EvalDataset::Cinc2016 => Some(BinaryKind::Cinc2016),
            EvalDataset::PascalA => Some(BinaryKind::PascalA),
            EvalDataset::PascalB => Some(BinaryKind::PascalB),
        }
    }
}

impl FromStr for EvalDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalDataset::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = EvalDataset::ALL.iter().map(|d| d.as_str()).collect();
                Error::InvalidInput(format!("unknown dataset `{s}`; valid: {}", valid.join(", ")))
            })
    }
}

impl fmt::Display for EvalDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub item_ref: String,
    pub task_id: TaskId,
    pub gold: String,
    pub predicted: String,
    pub options: Vec<String>,
    pub scores: Vec<f64>,
}

impl PredictionEntry {
    /// Entry for `item` answered by the highest of `scores`.
    pub fn from_scores(item_ref: &str, item: &McItem, gold: &str, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != item.options.len() {
            return Err(Error::shape(format!("{} scores", item.options.len()), scores.len()));
        }
        Ok(Self {
            item_ref: item_ref.to_string(),
            task_id: item.task_id,
            gold: gold.to_string(),
            predicted: item.options[argmax(&scores)].clone(),
            options: item.options.clone(),
            scores,
        })
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == self.gold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LogHeader {
    model_tag: String,
    config_hash: String,
    mode: SegMode,
    dataset: EvalDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLog {
    pub model_tag: String,
    pub config_hash: String,
    pub mode: SegMode,
    pub dataset: EvalDataset,
    pub entries: Vec<PredictionEntry>,
}

impl PredictionLog {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.scores.len() != e.options.len() {
                return Err(Error::shape(format!("{} scores", e.options.len()), e.scores.len()));
            }
            if !e.options.contains(&e.predicted) {
                return Err(Error::InvalidInput(format!(
                    "{}: predicted `{}` is not among the options",
                    e.item_ref, e.predicted
                )));
            }
        }
        Ok(())
    }

    /// A header line followed by one line per entry.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = LogHeader {
            model_tag: self.model_tag.clone(),
            config_hash: self.config_hash.clone(),
            mode: self.mode,
            dataset: self.dataset,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: LogHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::InvalidInput("empty prediction log".into()))?,
        )?;
        let entries = lines
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<_>>()?;
        let log = PredictionLog {
            model_tag: header.model_tag,
            config_hash: header.config_hash,
            mode: header.mode,
            dataset: header.dataset,
            entries,
        };
        log.validate()?;
        Ok(log)
    }
}

/// `(correct, total)` per task.
pub fn task_counts(log: &PredictionLog) -> BTreeMap<TaskId, (usize, usize)> {
    let mut counts = BTreeMap::new();
    for e in &log.entries {
        let c = counts.entry(e.task_id).or_insert((0, 0));
        c.0 += usize::from(e.is_correct());
        c.1 += 1;
    }
    counts
}

/// Fraction correct per task; tasks without entries are omitted.
pub fn accuracy_by_task(log: &PredictionLog) -> Result<BTreeMap<TaskId, f64>> {
    if log.entries.is_empty() {
        return Err(Error::InvalidInput("empty prediction log".into()));
    }
    Ok(task_counts(log)
        .into_iter()
        .map(|(t, (c, n))| (t, c as f64 / n as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaccWeights {
    pub present: f64,
    pub unknown: f64,
    pub absent: f64,
}

impl Default for WaccWeights {
    fn default() -> Self {
        Self {
            present: 5.0,
            unknown: 3.0,
            absent: 1.0,
        }
    }
}

impl WaccWeights {
    pub fn of(&self, class: MurmurClass) -> f64 {
        match class {
            MurmurClass::Present => self.present,
            MurmurClass::Unknown => self.unknown,
            MurmurClass::Absent => self.absent,
        }
    }
}

/// `Σ w_c·correct_c / Σ w_c·total_c` over the murmur presence entries.
pub fn weighted_accuracy(log: &PredictionLog, weights: &WaccWeights) -> Result<f64> {
    let mut correct = BTreeMap::<MurmurClass, u64>::new();
    let mut total = BTreeMap::<MurmurClass, u64>::new();
    for e in log.entries.iter().filter(|e| e.task_id == TaskId::MurmurPresence) {
        let class = MurmurClass::parse(&e.gold)
            .ok_or_else(|| Error::InvalidInput(format!("{}: gold `{}` is not a murmur class", e.item_ref, e.gold)))?;
        *total.entry(class).or_default() += 1;
        *correct.entry(class).or_default() += u64::from(e.is_correct());
    }
    let sum = |m: &BTreeMap<MurmurClass, u64>| -> f64 { m.iter().map(|(&c, &n)| weights.of(c) * n as f64).sum() };
    let denom = sum(&total);
    if denom == 0.0 {
        return Err(Error::InvalidInput("weighted accuracy has a zero denominator".into()));
    }
    Ok(sum(&correct) / denom)
}

/// Zero-shot mapping of a presence answer onto normal/abnormal.
pub fn zero_shot_label(predicted: &str) -> Result<BinaryLabel> {
    match MurmurClass::parse(predicted) {
        Some(MurmurClass::Absent) => Ok(BinaryLabel::Normal),
        Some(MurmurClass::Present | MurmurClass::Unknown) => Ok(BinaryLabel::Abnormal),
        None => Err(Error::InvalidInput(format!("`{predicted}` is not a murmur class"))),
    }
}

pub fn parse_binary_label(s: &str) -> Result<BinaryLabel> {
    match s.to_ascii_lowercase().as_str() {
        "normal" => Ok(BinaryLabel::Normal),
        "abnormal" => Ok(BinaryLabel::Abnormal),
        _ => Err(Error::InvalidInput(format!("`{s}` is not normal or abnormal"))),
    }
}

/// `(gold, predicted)` pairs of a zero-shot log.
pub fn binary_pairs(log: &PredictionLog) -> Result<Vec<(BinaryLabel, BinaryLabel)>> {
    log.entries
        .iter()
        .map(|e| Ok((parse_binary_label(&e.gold)?, zero_shot_label(&e.predicted)?)))
        .collect()
}

/// TP / (TP + FP) for `class`; `None` when `class` was never predicted.
pub fn class_precision(pairs: &[(BinaryLabel, BinaryLabel)], class: BinaryLabel) -> Option<f64> {
    let predicted = pairs.iter().filter(|(_, p)| *p == class).count();
    let tp = pairs.iter().filter(|(g, p)| *p == class && *g == class).count();
    (predicted > 0).then(|| tp as f64 / predicted as f64)
}

pub fn binary_accuracy(pairs: &[(BinaryLabel, BinaryLabel)]) -> Option<f64> {
    let hits = pairs.iter().filter(|(g, p)| g == p).count();
    (!pairs.is_empty()).then(|| hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub mode: SegMode,
    pub dataset: EvalDataset,
    pub model_tag: String,
    pub config_hash: String,
    pub accuracy: BTreeMap<TaskId, f64>,
    pub counts: BTreeMap<TaskId, usize>,
    pub weighted_accuracy: Option<f64>,
    /// Zero-shot datasets only.
    pub binary_accuracy: Option<f64>,
    pub precision: BTreeMap<BinaryLabel, Option<f64>>,
}

pub fn evaluate(system: &str, log: &PredictionLog, weights: &WaccWeights) -> Result<EvalReport> {
    log.validate()?;
    let mut report = EvalReport {
        system: system.to_string(),
        mode: log.mode,
        dataset: log.dataset,
        model_tag: log.model_tag.clone(),
        config_hash: log.config_hash.clone(),
        accuracy: BTreeMap::new(),
        counts: task_counts(log).into_iter().map(|(t, (_, n))| (t, n)).collect(),
        weighted_accuracy: None,
        binary_accuracy: None,
        precision: BTreeMap::new(),
    };
    if log.dataset.binary_kind().is_some() {
        let pairs = binary_pairs(log)?;
        report.binary_accuracy = binary_accuracy(&pairs);
        for class in [BinaryLabel::Normal, BinaryLabel::Abnormal] {
            report.precision.insert(class, class_precision(&pairs, class));
        }
    } else {
        report.accuracy = accuracy_by_task(log)?;
        if report.counts.contains_key(&TaskId::MurmurPresence) {
            report.weighted_accuracy = Some(weighted_accuracy(log, weights)?);
        }
    }
    Ok(report)
}

/// One row of a results table; values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub system: String,
    pub mode: Option<SegMode>,
    pub reference: bool,
    pub cells: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTables {
    pub systolic: Table,
    pub diastolic: Table,
    pub zero_shot: Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub reports: Vec<EvalReport>,
    pub tables: ReportTables,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub text: String,
    pub json: String,
}

pub const SYSTOLIC_TASKS: [TaskId; 5] = [
    TaskId::SysTiming,
    TaskId::SysShape,
    TaskId::SysGrading,
    TaskId::SysPitch,
    TaskId::SysQuality,
];
pub const DIASTOLIC_TASKS: [TaskId; 5] = [
    TaskId::DiaTiming,
    TaskId::DiaShape,
    TaskId::DiaGrading,
    TaskId::DiaPitch,
    TaskId::DiaQuality,
];
const FEATURE_COLUMNS: [&str; 5] = ["Timing", "Shape", "Grading", "Pitch", "Quality"];

fn pct(values: &[f64]) -> Vec<Option<f64>> {
    values.iter().map(|v| Some(v / 100.0)).collect()
}

fn reference_row(system: &str, mode: Option<SegMode>, cells: Vec<Option<f64>>) -> TableRow {
    TableRow {
        system: system.to_string(),
        mode,
        reference: true,
        cells,
    }
}

/// Published rows the tables are compared against: (systolic, diastolic, zero-shot).
pub fn reference_rows() -> (Vec<TableRow>, Vec<TableRow>, Vec<TableRow>) {
    let ours = "Audio LLM";
    let systolic = vec![
        reference_row("Deep CardioSound", None, pct(&[96.6, 96.3, 96.6, 96.6, 96.5])),
        reference_row(ours, Some(SegMode::Ns), pct(&[100.0, 99.7, 33.4, 99.7, 99.2])),
        reference_row(ours, Some(SegMode::Ws), pct(&[100.0, 100.0, 33.4, 100.0, 100.0])),
    ];
    let mut m2d = vec![None; 5];
    m2d.push(Some(0.832));
    let diastolic = vec![
        reference_row("M2D+AST", None, m2d),
        reference_row(ours, Some(SegMode::Ns), pct(&[100.0, 99.9, 39.5, 100.0, 100.0, 63.7])),
        reference_row(ours, Some(SegMode::Ws), pct(&[100.0, 100.0, 42.7, 100.0, 100.0, 75.6])),
    ];
    let zero_shot = vec![
        reference_row(ours, Some(SegMode::Ns), pct(&[19.63, 48.7, 0.0, 73.7, 40.0])),
        reference_row(ours, Some(SegMode::Ws), pct(&[66.33, 48.3, 100.0, 75.3, 62.5])),
    ];
    (systolic, diastolic, zero_shot)
}

fn group_rows(reports: &[EvalReport]) -> Vec<((String, SegMode), Vec<&EvalReport>)> {
    let mut groups: BTreeMap<(String, SegMode), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.system.clone(), r.mode)).or_default().push(r);
    }
    groups.into_iter().collect()
}

fn find<'a>(group: &[&'a EvalReport], dataset: EvalDataset) -> Option<&'a EvalReport> {
    group.iter().rev().find(|r| r.dataset == dataset).copied()
}

pub fn build_tables(reports: &[EvalReport]) -> ReportTables {
    let (mut sys_rows, mut dia_rows, mut zs_rows) = reference_rows();
    for ((system, mode), group) in group_rows(reports) {
        let row = |cells| TableRow {
            system: system.clone(),
            mode: Some(mode),
            reference: false,
            cells,
        };
        if let Some(r) = find(&group, EvalDataset::CircorTest) {
            sys_rows.push(row(SYSTOLIC_TASKS.iter().map(|t| r.accuracy.get(t).copied()).collect()));
            let mut cells: Vec<_> = DIASTOLIC_TASKS.iter().map(|t| r.accuracy.get(t).copied()).collect();
            cells.push(r.weighted_accuracy);
            dia_rows.push(row(cells));
        }
        let prec = |d, c| find(&group, d).and_then(|r: &EvalReport| r.precision.get(&c).copied().flatten());
        let cinc = find(&group, EvalDataset::Cinc2016).and_then(|r| r.binary_accuracy);
        let pascal = [EvalDataset::PascalA, EvalDataset::PascalB];
        if cinc.is_some() || pascal.iter().any(|&d| find(&group, d).is_some()) {
            let mut cells = vec![cinc];
            for d in pascal {
                cells.push(prec(d, BinaryLabel::Normal));
                cells.push(prec(d, BinaryLabel::Abnormal));
            }
            zs_rows.push(row(cells));
        }
    }
    let columns = |extra: &[&str]| -> Vec<String> {
        FEATURE_COLUMNS.iter().chain(extra).map(|s| s.to_string()).collect()
    };
    ReportTables {
        systolic: Table {
            title: "Systolic phase feature accuracy (%)".into(),
            columns: columns(&[]),
            rows: sys_rows,
        },
        diastolic: Table {
            title: "Diastolic phase feature accuracy (%)".into(),
            columns: columns(&["Murmur W.acc"]),
            rows: dia_rows,
        },
        zero_shot: Table {
            title: "Zero-shot normal/abnormal classification".into(),
            columns: [
                "CinC 2016 Accuracy",
                "Pascal A Normal Precision",
                "Pascal A Abnormal Precision",
                "Pascal B Normal Precision",
                "Pascal B Abnormal Precision",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            rows: zs_rows,
        },
    }
}

fn fmt_cell(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(v) => format!("{:.*}", decimals, v * 100.0),
        None => UNDEFINED.to_string(),
    }
}

fn row_label(row: &TableRow) -> String {
    let mut s = row.system.clone();
    if let Some(m) = row.mode {
        s.push_str(&format!(" {m}"));
    }
    if row.reference {
        s.push_str(&format!(" ({REFERENCE_NOTE})"));
    }
    s
}

fn render_grid(title: &str, header: Vec<String>, body: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut out = format!("{title}\n{}\n", line(&header));
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 3 * (widths.len() - 1)));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn render_table(table: &Table) -> String {
    let mut header = vec!["System".to_string()];
    header.extend(table.columns.iter().cloned());
    let body = table
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![row_label(r)];
            cells.extend(r.cells.iter().map(|&c| fmt_cell(c, 1)));
            cells
        })
        .collect();
    render_grid(&table.title, header, body)
}

fn render_zero_shot(table: &Table) -> String {
    let header = ["System", "CinC 2016 % Accuracy", "Pascal A Normal / Abnormal Precision", "Pascal B Normal / Abnormal Precision"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body = table
        .rows
        .iter()
        .map(|r| {
            let c = |i: usize| r.cells.get(i).copied().flatten();
            vec![
                row_label(r),
                c(0).map_or(UNDEFINED.to_string(), |v| format!("{:.2}%", v * 100.0)),
                format!("{} / {} %", fmt_cell(c(1), 1), fmt_cell(c(2), 1)),
                format!("{} / {} %", fmt_cell(c(3), 1), fmt_cell(c(4), 1)),
            ]
        })
        .collect();
    render_grid(&table.title, header, body)
}

/// Plain-text tables plus a JSON document that `parse_report` reads back.
pub fn render_report(reports: &[EvalReport]) -> Result<Rendered> {
    let report = Report {
        reports: reports.to_vec(),
        tables: build_tables(reports),
    };
    let text = [
        render_table(&report.tables.systolic),
        render_table(&report.tables.diastolic),
        render_zero_shot(&report.tables.zero_shot),
    ]
    .join("\n");
    let json = serde_json::to_string_pretty(&report)?;
    Ok(Rendered { text, json })
}

pub fn parse_report(json: &str) -> Result<Report> {
    Ok(serde_json::from_str(json)?)
}
