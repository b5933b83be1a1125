use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::record::{EpisodeRecord, EventKind, Termination};
use crate::digest::float_or_inf;
use crate::stack::model::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub collision: bool,
    pub route_completion: f64,
    #[serde(with = "float_or_inf")]
    pub min_ttc: f64,
    #[serde(with = "float_or_inf")]
    pub closest_approach: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_success_rate: Option<f64>,
    pub takeover_count: u64,
    /// Takeovers per minute of simulated time.
    pub takeover_frequency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perception_accuracy: Option<f64>,
    pub ticks: u64,
    pub attacked: bool,
    pub truncated: bool,
}

pub fn compute_metrics(record: &EpisodeRecord) -> Metrics {
    let s = &record.summary;
    let collision = record.events().any(|e| e.kind == EventKind::Collision);
    let mut min_ttc = s.final_ttc;
    let mut closest = s.final_gap;
    for t in &record.ticks {
        min_ttc = min_ttc.min(t.ttc);
        closest = closest.min(t.gap);
    }
    if collision {
        min_ttc = 0.0;
    }
    let takeover_count = record.events().filter(|e| e.kind == EventKind::Takeover).count() as u64;
    let minutes = s.ticks as f64 * record.header.dt / 60.0;
    let takeover_frequency = if minutes > 0.0 {
        takeover_count as f64 / minutes
    } else {
        0.0
    };
    let mut base = 0usize;
    let mut flipped = 0usize;
    let mut judged = 0usize;
    let mut correct = 0usize;
    let mut attacked = false;
    for t in &record.ticks {
        attacked |= t.attack.is_some() || t.clean_perception.is_some() || !t.insertions.is_empty();
        if let Some(p) = &t.perception {
            judged += 1;
            let pred = argmax(p);
            correct += (pred == t.ground_truth) as usize;
            if let Some(c) = &t.clean_perception {
                if argmax(c) == t.ground_truth {
                    base += 1;
                    flipped += (pred != t.ground_truth) as usize;
                }
            }
        }
    }
    let has_attack_ticks = record.ticks.iter().any(|t| t.clean_perception.is_some());
    Metrics {
        collision,
        route_completion: s.route_completion,
        min_ttc,
        closest_approach: closest,
        attack_success_rate: has_attack_ticks.then(|| if base == 0 { 0.0 } else { flipped as f64 / base as f64 }),
        takeover_count,
        takeover_frequency,
        perception_accuracy: (judged > 0).then(|| correct as f64 / judged as f64),
        ticks: s.ticks,
        attacked,
        truncated: s.termination == Termination::Truncated,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub label: String,
    pub episodes: usize,
    pub collision_rate: f64,
    pub mean_route_completion: f64,
    /// Mean over episodes with a finite min-TTC; `None` when every episode was infinite.
    pub mean_min_ttc: Option<f64>,
    pub mean_attack_success_rate: Option<f64>,
    pub mean_takeover_count: f64,
    /// Total takeovers divided by total simulated minutes.
    pub takeover_frequency: f64,
    pub mean_perception_accuracy: Option<f64>,
}

fn mean_of(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Groups records by header label, in label order.
pub fn aggregate(records: &[EpisodeRecord]) -> Vec<GroupRow> {
    let mut groups: BTreeMap<&str, Vec<(&EpisodeRecord, Metrics)>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.header.label.as_str())
            .or_default()
            .push((r, compute_metrics(r)));
    }
    groups
        .into_iter()
        .map(|(label, rows)| {
            let n = rows.len();
            let ms = || rows.iter().map(|(_, m)| m);
            let total_minutes: f64 = rows.iter().map(|(r, m)| m.ticks as f64 * r.header.dt / 60.0).sum();
            let total_takeovers: u64 = ms().map(|m| m.takeover_count).sum();
            GroupRow {
                label: label.to_string(),
                episodes: n,
                collision_rate: ms().filter(|m| m.collision).count() as f64 / n as f64,
                mean_route_completion: mean_of(ms().map(|m| m.route_completion)).unwrap_or(0.0),
                mean_min_ttc: mean_of(ms().map(|m| m.min_ttc).filter(|v| v.is_finite())),
                mean_attack_success_rate: mean_of(ms().filter_map(|m| m.attack_success_rate)),
                mean_takeover_count: total_takeovers as f64 / n as f64,
                takeover_frequency: if total_minutes > 0.0 {
                    total_takeovers as f64 / total_minutes
                } else {
                    0.0
                },
                mean_perception_accuracy: mean_of(ms().filter_map(|m| m.perception_accuracy)),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Aligned plain-text rendering of an aggregate table.
pub fn format_table(rows: &[GroupRow]) -> String {
    let head = [
        "label", "n", "collision", "completion", "min_ttc", "attack_sr", "takeovers", "takeover/min", "accuracy",
    ];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.episodes.to_string(),
                format!("{:.4}", r.collision_rate),
                format!("{:.4}", r.mean_route_completion),
                opt(r.mean_min_ttc),
                opt(r.mean_attack_success_rate),
                format!("{:.4}", r.mean_takeover_count),
                format!("{:.4}", r.takeover_frequency),
                opt(r.mean_perception_accuracy),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = head.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(head.to_vec(), &mut out);
    for row in &body {
        line(row.iter().map(|s| s.as_str()).collect(), &mut out);
    }
    out
}
