//! Summaries of results tables: grouped bar charts as standalone SVG and a
//! markdown table next to the published reference values.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::harness::ResultRecord;
use crate::numerics::mean_and_sample_sd;

/// Heading of the reference table.
pub const REFERENCE_LABEL: &str = "reference (BRIGHTEN, not reproducible here)";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub model: &'static str,
    pub split_mode: &'static str,
    pub test_mse: f64,
    pub test_r2: f64,
}

/// Test metrics published for the original cohort with all modalities and
/// four training weeks (temporal) or a random split.
pub const REFERENCE: [Reference; 5] = [
    Reference { model: "CM", split_mode: "temporal", test_mse: 0.4985, test_r2: 0.4695 },
    Reference { model: "RF", split_mode: "temporal", test_mse: 0.5305, test_r2: 0.4356 },
    Reference { model: "LR", split_mode: "temporal", test_mse: 0.65, test_r2: 0.29 },
    Reference { model: "CM", split_mode: "random", test_mse: 0.5635, test_r2: 0.4316 },
    Reference { model: "RF", split_mode: "random", test_mse: 0.6007, test_r2: 0.3943 },
];

const ALL_MODALITIES: &str = "PF+BG+PHQ9";

/// Mean and sample sd of each metric over the repeats of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub model: String,
    pub modalities: String,
    pub split_mode: String,
    pub train_weeks: Option<u32>,
    pub repeats: usize,
    pub train_mse: (f64, f64),
    pub test_mse: (f64, f64),
    pub train_r2: (f64, f64),
    pub test_r2: (f64, f64),
}

impl Aggregate {
    /// Chart group label: modalities and split.
    pub fn scenario(&self) -> String {
        match self.train_weeks {
            Some(w) => format!("{} {} {}w", self.modalities, self.split_mode, w),
            None => format!("{} {}", self.modalities, self.split_mode),
        }
    }
}

/// Groups records by (model, modalities, split, weeks) in order of first
/// appearance.
pub fn aggregate(records: &[ResultRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(&str, &str, &str, Option<u32>)> = Vec::new();
    let mut members: Vec<Vec<&ResultRecord>> = Vec::new();
    for r in records {
        let key = (r.model.as_str(), r.modalities.as_str(), r.split_mode.as_str(), r.train_weeks);
        match keys.iter().position(|k| *k == key) {
            Some(i) => members[i].push(r),
            None => {
                keys.push(key);
                members.push(vec![r]);
            }
        }
    }
    keys.iter()
        .zip(&members)
        .map(|(&(model, modalities, split_mode, train_weeks), rows)| {
            let stat = |f: fn(&ResultRecord) -> f64| mean_and_sample_sd(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            Aggregate {
                model: model.to_string(),
                modalities: modalities.to_string(),
                split_mode: split_mode.to_string(),
                train_weeks,
                repeats: rows.len(),
                train_mse: stat(|r| r.train_mse),
                test_mse: stat(|r| r.test_mse),
                train_r2: stat(|r| r.train_r2),
                test_r2: stat(|r| r.test_r2),
            }
        })
        .collect()
}

pub struct Report {
    pub svg: String,
    pub markdown: String,
}

pub fn build_report(records: &[ResultRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Argument("no result rows to report".into()));
    }
    let aggs = aggregate(records);
    Ok(Report {
        svg: render_svg(&aggs),
        markdown: render_markdown(&aggs),
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

fn model_colour(model: &str) -> &'static str {
    match model {
        "CM" => "#1b9e77",
        "RF" => "#d95f02",
        "LR" => "#7570b3",
        _ => "#666666",
    }
}

type Metric = fn(&Aggregate) -> (f64, f64);

const BAR_WIDTH: f64 = 18.0;
const GROUP_GAP: f64 = 24.0;
const PANEL_HEIGHT: f64 = 220.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_TOP: f64 = 50.0;
const LABEL_SPACE: f64 = 60.0;

fn render_svg(aggs: &[Aggregate]) -> String {
    let mut scenarios: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    for a in aggs {
        if !scenarios.contains(&a.scenario()) {
            scenarios.push(a.scenario());
        }
        if !models.contains(&a.model) {
            models.push(a.model.clone());
        }
    }
    let group_width = models.len() as f64 * BAR_WIDTH + GROUP_GAP;
    let plot_width = scenarios.len() as f64 * group_width;
    let width = MARGIN_LEFT + plot_width + 20.0;
    let panel_total = PANEL_HEIGHT + LABEL_SPACE + MARGIN_TOP;
    let height = MARGIN_TOP + 2.0 * panel_total;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, m) in models.iter().enumerate() {
        let x = MARGIN_LEFT + i as f64 * 70.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><rect x="{x:.1}" y="12" width="12" height="12" fill="{}"/><text x="{:.1}" y="22">{}</text></g>"#,
            model_colour(m),
            x + 16.0,
            escape(m)
        );
    }

    let panels: [(&str, Metric); 2] = [("Test MSE", |a| a.test_mse), ("Test R²", |a| a.test_r2)];
    for (p, (title, metric)) in panels.iter().enumerate() {
        let top = MARGIN_TOP + p as f64 * panel_total + MARGIN_TOP - 20.0;
        let values: Vec<f64> = aggs.iter().map(|a| metric(a).0).filter(|v| v.is_finite()).collect();
        let mut lo = values.iter().copied().fold(0.0_f64, f64::min);
        let mut hi = values.iter().copied().fold(0.0_f64, f64::max);
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let pad = 0.1 * (hi - lo);
        hi += if hi > 0.0 { pad } else { 0.0 };
        lo -= if lo < 0.0 { pad } else { 0.0 };
        let y_of = |v: f64| top + PANEL_HEIGHT * (hi - v) / (hi - lo);

        let _ = writeln!(svg, r#"<g class="panel">"#);
        let _ = writeln!(
            svg,
            r#"<text class="panel-title" x="{:.1}" y="{:.1}" font-size="13" font-weight="bold">{}</text>"#,
            MARGIN_LEFT,
            top - 8.0,
            escape(title)
        );
        for t in 0..=4 {
            let v = lo + (hi - lo) * t as f64 / 4.0;
            let y = y_of(v);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text class="tick" x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
                MARGIN_LEFT,
                MARGIN_LEFT + plot_width,
                MARGIN_LEFT - 6.0,
                y + 4.0
            );
        }
        let zero = y_of(0.0);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{zero:.1}" x2="{:.1}" y2="{zero:.1}" stroke="#000000"/>"##,
            MARGIN_LEFT,
            MARGIN_LEFT + plot_width
        );
        for (g, scenario) in scenarios.iter().enumerate() {
            let gx = MARGIN_LEFT + g as f64 * group_width + GROUP_GAP / 2.0;
            for (k, m) in models.iter().enumerate() {
                let Some(a) = aggs.iter().find(|a| &a.model == m && &a.scenario() == scenario) else {
                    continue;
                };
                let (mean, sd) = metric(a);
                if !mean.is_finite() {
                    continue;
                }
                let x = gx + k as f64 * BAR_WIDTH;
                let (y0, y1) = (y_of(mean).min(zero), y_of(mean).max(zero));
                let _ = writeln!(
                    svg,
                    r#"<rect class="bar" x="{x:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {mean:.4} ± {sd:.4}</title></rect>"#,
                    BAR_WIDTH - 2.0,
                    y1 - y0,
                    model_colour(m),
                    escape(m),
                    escape(scenario)
                );
                if sd > 0.0 && sd.is_finite() {
                    let cx = x + (BAR_WIDTH - 2.0) / 2.0;
                    let _ = writeln!(
                        svg,
                        r##"<line class="error-bar" x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#000000"/>"##,
                        y_of(mean + sd),
                        y_of(mean - sd)
                    );
                }
            }
            let lx = gx + models.len() as f64 * BAR_WIDTH / 2.0;
            let ly = top + PANEL_HEIGHT + 14.0;
            let _ = writeln!(
                svg,
                r#"<text class="group-label" x="{lx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-35 {lx:.1} {ly:.1})">{}</text>"#,
                escape(scenario)
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

fn pm(v: (f64, f64)) -> String {
    format!("{:.4} ± {:.4}", v.0, v.1)
}

fn render_markdown(aggs: &[Aggregate]) -> String {
    let mut md = String::from("# fuselab report\n\n## Run results\n\n");
    md.push_str("Mean ± sample sd over repeats.\n\n");
    md.push_str("| model | modalities | split | train weeks | repeats | train MSE | test MSE | train R² | test R² |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for a in aggs {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            a.model,
            a.modalities,
            a.split_mode,
            a.train_weeks.map(|w| w.to_string()).unwrap_or_else(|| "-".into()),
            a.repeats,
            pm(a.train_mse),
            pm(a.test_mse),
            pm(a.train_r2),
            pm(a.test_r2)
        );
    }

    let _ = write!(md, "\n## {REFERENCE_LABEL}\n\n");
    md.push_str(
        "Published test metrics for the original cohort (all modalities; temporal rows use four training weeks). \
         Run columns show this run's matching configuration where present.\n\n",
    );
    md.push_str("| model | split | reference test MSE | run test MSE | reference test R² | run test R² |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for r in REFERENCE {
        let run = aggs.iter().find(|a| {
            a.model == r.model
                && a.split_mode == r.split_mode
                && a.modalities == ALL_MODALITIES
                && (r.split_mode != "temporal" || a.train_weeks == Some(4))
        });
        let show = |f: fn(&Aggregate) -> (f64, f64)| run.map(|a| format!("{:.4}", f(a).0)).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.model,
            r.split_mode,
            r.test_mse,
            show(|a| a.test_mse),
            r.test_r2,
            show(|a| a.test_r2)
        );
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: &str, modalities: &str, weeks: Option<u32>, seed: u64, test_mse: f64, test_r2: f64) -> ResultRecord {
        ResultRecord {
            model: model.into(),
            modalities: modalities.into(),
            split_mode: if weeks.is_some() { "temporal" } else { "random" }.into(),
            train_weeks: weeks,
            seed,
            train_mse: 0.4,
            test_mse,
            train_r2: 0.6,
            test_r2,
            chosen_hparams: String::new(),
        }
    }

    fn sample() -> Vec<ResultRecord> {
        vec![
            rec("CM", ALL_MODALITIES, Some(4), 1, 0.5, 0.4),
            rec("CM", ALL_MODALITIES, Some(4), 2, 0.7, 0.2),
            rec("RF", ALL_MODALITIES, Some(4), 1, 0.6, -0.1),
            rec("CM", "PF", Some(4), 1, 0.9, 0.1),
        ]
    }

    #[test]
    fn aggregates_by_configuration() {
        let a = aggregate(&sample());
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].repeats, 2);
        assert!((a[0].test_mse.0 - 0.6).abs() < 1e-12);
        assert!((a[0].test_mse.1 - 0.02_f64.sqrt()).abs() < 1e-9);
        assert_eq!(a[2].scenario(), "PF temporal 4w");
    }

    #[test]
    fn svg_has_one_bar_per_configuration_and_metric() {
        let r = build_report(&sample()).unwrap();
        assert_eq!(r.svg.matches(r#"class="bar""#).count(), 6);
        assert_eq!(r.svg.matches(r#"class="legend""#).count(), 2);
        assert_eq!(r.svg.matches(r#"class="group-label""#).count(), 4);
        assert!(r.svg.contains("Test MSE") && r.svg.contains("Test R²"));
        assert!(r.svg.contains("PF+BG+PHQ9 temporal 4w"));
        assert!(r.svg.starts_with("<svg") && r.svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn markdown_reference_rows() {
        let md = build_report(&sample()).unwrap().markdown;
        assert!(md.contains(REFERENCE_LABEL));
        assert!(md.contains("| CM | temporal | 0.4985 | 0.6000 | 0.4695 | 0.3000 |"), "{md}");
        assert!(md.contains("| RF | random | 0.6007 | - | 0.3943 | - |"));
        assert!(md.contains("| LR | temporal | 0.65 | - | 0.29 | - |"));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(build_report(&[]).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        assert_eq!(escape("a<b&\"c\">"), "a&lt;b&amp;&quot;c&quot;&gt;");
    }
}
