//! Mode and signal comparisons across a map set, as CSV tables.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::map::NoteMap;
use super::rollout::{run_repeated, AgentFactory, AveragedReport, Mode, RunConfig};
use super::SimError;
use crate::horizon::{ControllerConfig, Signal};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub map: String,
    pub notes_per_sec: f64,
    /// Mode label (first table) or signal name (second table).
    pub label: String,
    pub report: AveragedReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTables {
    pub modes: Vec<AblationRow>,
    pub signals: Vec<AblationRow>,
}

#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub maps: Vec<NoteMap>,
    /// Labeled modes for the first table.
    pub modes: Vec<(String, Mode)>,
    /// Signals for the second table; each runs the adaptive controller
    /// built from `controller` with the signal swapped in.
    pub signals: Vec<Signal>,
    pub controller: ControllerConfig,
    pub run: RunConfig,
    /// Cells evaluated concurrently.
    pub jobs: usize,
}

/// Runs every (map, mode) and (map, signal) cell.
pub fn run_ablation(factory: &AgentFactory<'_>, spec: &AblationSpec) -> Result<AblationTables, SimError> {
    let mut cells: Vec<(usize, String, Mode, bool)> = Vec::new();
    for (mi, _) in spec.maps.iter().enumerate() {
        for (label, mode) in &spec.modes {
            cells.push((mi, label.clone(), *mode, false));
        }
        for &signal in &spec.signals {
            let cfg = ControllerConfig {
                signal,
                ..spec.controller
            };
            cells.push((mi, signal.to_string(), Mode::Adaptive(cfg), true));
        }
    }
    let results = run_cells(factory, spec, &cells)?;
    let mut tables = AblationTables {
        modes: Vec::new(),
        signals: Vec::new(),
    };
    for ((mi, label, _, is_signal), report) in cells.into_iter().zip(results) {
        let map = &spec.maps[mi];
        let row = AblationRow {
            map: map.spec.id.clone(),
            notes_per_sec: map.spec.density,
            label,
            report,
        };
        if is_signal {
            tables.signals.push(row);
        } else {
            tables.modes.push(row);
        }
    }
    Ok(tables)
}

fn run_cells(
    factory: &AgentFactory<'_>,
    spec: &AblationSpec,
    cells: &[(usize, String, Mode, bool)],
) -> Result<Vec<AveragedReport>, SimError> {
    let run_one = |i: usize| {
        let (mi, _, mode, _) = &cells[i];
        let mut agent = factory();
        run_repeated(agent.as_mut(), &spec.maps[*mi], mode, &spec.run)
    };
    if spec.jobs <= 1 {
        return (0..cells.len()).map(run_one).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<AveragedReport, SimError>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..spec.jobs.min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let r = run_one(i);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

fn write_table<W: Write>(rows: &[AblationRow], label_header: &str, mut w: W) -> Result<(), SimError> {
    writeln!(w, "Map,Notes/sec,{label_header},Max Combo,Accuracy (% Good)")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.2},{},{:.2},{:.2}",
            r.map, r.notes_per_sec, r.label, r.report.max_combo, r.report.accuracy
        )?;
    }
    Ok(())
}

/// Sliding window versus open-loop execution.
pub fn write_mode_table<W: Write>(rows: &[AblationRow], w: W) -> Result<(), SimError> {
    write_table(rows, "Mode", w)
}

/// One row per adaptation signal.
pub fn write_signal_table<W: Write>(rows: &[AblationRow], w: W) -> Result<(), SimError> {
    write_table(rows, "Signal", w)
}

/// Mean accuracy per label over all maps, in first-seen label order.
pub fn mean_accuracy_by_label(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(l, _, _)| *l == r.label) {
            Some(e) => {
                e.1 += r.report.accuracy;
                e.2 += 1;
            }
            None => out.push((r.label.clone(), r.report.accuracy, 1)),
        }
    }
    out.into_iter().map(|(l, s, n)| (l, s / n as f64)).collect()
}
