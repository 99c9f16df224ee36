//! New Jersey county case counts as timestamped events on the county
//! border graph.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::{Edge, WeightedDigraph};
use crate::sampler::{sequence_rng, DatasetBundle, Event, EventSequence};

pub const STATE: &str = "New Jersey";
pub const WINDOW_DAYS: usize = 8;
pub const TEST_FRACTION: f64 = 0.2;

const ADJACENCY_JSON: &str = include_str!("../data/nj_county_adjacency.json");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdjacencyFile {
    #[allow(dead_code)]
    source: String,
    counties: Vec<String>,
    borders: Vec<(String, String)>,
}

/// County names in node order, plus the border pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CountyTable {
    names: Vec<String>,
    borders: Vec<(usize, usize)>,
}

impl CountyTable {
    /// The 21 New Jersey counties, alphabetical, with the bundled borders.
    pub fn new_jersey() -> Self {
        CountyTable::from_json(ADJACENCY_JSON).expect("bundled adjacency file is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: AdjacencyFile = serde_json::from_str(text)?;
        let mut table = CountyTable {
            names: file.counties,
            borders: Vec::new(),
        };
        for (a, b) in &file.borders {
            let (i, j) = (table.id(a)?, table.id(b)?);
            if i == j {
                return Err(Error::InvalidGraph(format!("county '{a}' borders itself")));
            }
            table.borders.push((i.min(j), i.max(j)));
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn borders(&self) -> &[(usize, usize)] {
        &self.borders
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownCounty(name.to_string()))
    }

    /// Unit-weight edges in both directions along every border.
    pub fn graph(&self) -> Result<WeightedDigraph> {
        let mut edges = Vec::with_capacity(2 * self.borders.len());
        for &(a, b) in &self.borders {
            edges.push(Edge { src: a, dst: b, weight: 1.0 });
            edges.push(Edge { src: b, dst: a, weight: 1.0 });
        }
        WeightedDigraph::new(self.names.len(), edges)
    }
}

/// New cases per day and county over a contiguous date range.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyCounts {
    pub start: NaiveDate,
    /// `counts[day][county]`.
    pub counts: Vec<Vec<u64>>,
    /// Day-over-day decreases of a cumulative count, set to zero.
    pub clamped: usize,
    /// Rows with county "Unknown", which have no node.
    pub skipped_unknown: usize,
}

impl DailyCounts {
    pub fn days(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Deserialize)]
struct CaseRow {
    date: String,
    county: String,
    state: String,
    #[allow(dead_code)]
    fips: String,
    cases: String,
    #[allow(dead_code)]
    deaths: String,
}

/// Reads a cumulative `date,county,state,fips,cases,deaths` file, keeps the
/// New Jersey rows and differences each county's cumulative cases into
/// daily new cases. Days a county is missing carry its previous total.
pub fn parse_cases(input: impl Read, source: &str, table: &CountyTable) -> Result<DailyCounts> {
    let mut reader = csv::Reader::from_reader(input);
    let header_ok = reader
        .headers()
        .map(|h| h.iter().eq(["date", "county", "state", "fips", "cases", "deaths"]))
        .unwrap_or(false);
    if !header_ok {
        return Err(parse_error(source, 1, "expected header date,county,state,fips,cases,deaths"));
    }
    let mut cumulative: BTreeMap<(NaiveDate, usize), u64> = BTreeMap::new();
    let mut skipped_unknown = 0;
    for (i, row) in reader.deserialize::<CaseRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_error(source, line, &e.to_string()))?;
        if row.state != STATE {
            continue;
        }
        if row.county == "Unknown" {
            skipped_unknown += 1;
            continue;
        }
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| parse_error(source, line, &format!("date '{}': {e}", row.date)))?;
        let cases: u64 = row
            .cases
            .trim()
            .parse()
            .map_err(|_| parse_error(source, line, &format!("case count '{}'", row.cases)))?;
        let county = table.id(&row.county)?;
        if cumulative.insert((date, county), cases).is_some() {
            return Err(parse_error(source, line, "repeated date and county"));
        }
    }
    if skipped_unknown > 0 {
        log::info!("skipped {skipped_unknown} rows with county 'Unknown'");
    }
    let start = cumulative
        .keys()
        .map(|k| k.0)
        .min()
        .ok_or_else(|| Error::invalid(format!("{source}: no {STATE} rows")))?;
    let end = cumulative.keys().map(|k| k.0).max().unwrap();
    let days = (end - start).num_days() as usize + 1;
    let mut counts = vec![vec![0u64; table.len()]; days];
    let mut last = vec![0u64; table.len()];
    let mut clamped = 0;
    for (&(date, county), &total) in &cumulative {
        let day = (date - start).num_days() as usize;
        let prev = last[county];
        if total < prev {
            log::warn!(
                "{}: cumulative cases fell from {prev} to {total} on {date}; counted as 0 new",
                table.names[county]
            );
            clamped += 1;
        } else {
            counts[day][county] = total - prev;
        }
        last[county] = total;
    }
    Ok(DailyCounts {
        start,
        counts,
        clamped,
        skipped_unknown,
    })
}

fn parse_error(source: &str, line: usize, message: &str) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSettings {
    pub window_days: usize,
    pub test_fraction: f64,
    /// Each case is kept independently with this probability.
    pub case_fraction: f64,
    pub seed: u64,
}

impl Default for WindowSettings {
    fn default() -> Self {
        WindowSettings {
            window_days: WINDOW_DAYS,
            test_fraction: TEST_FRACTION,
            case_fraction: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovidSplit {
    pub train: DatasetBundle,
    pub test: DatasetBundle,
    /// First date of every window, train windows first.
    pub window_starts: Vec<NaiveDate>,
}

/// Turns daily counts into one event sequence per `window_days`-day window.
///
/// A case on day `d` of a window becomes an event at `d + u` with
/// `u ~ Uniform(0, 1)`. A shorter final window is kept. The last
/// `test_fraction` of windows, rounded, forms the test split.
pub fn build_event_windows(
    daily: &DailyCounts,
    table: &CountyTable,
    settings: &WindowSettings,
) -> Result<CovidSplit> {
    if daily.days() == 0 {
        return Err(Error::invalid("empty date range"));
    }
    if settings.window_days == 0 {
        return Err(Error::invalid("window_days must be positive"));
    }
    if !(0.0..1.0).contains(&settings.test_fraction) {
        return Err(Error::invalid("test_fraction must lie in [0, 1)"));
    }
    if !(settings.case_fraction > 0.0 && settings.case_fraction <= 1.0) {
        return Err(Error::invalid("case_fraction must lie in (0, 1]"));
    }
    let horizon = settings.window_days as f64;
    let mut sequences = Vec::new();
    let mut window_starts = Vec::new();
    for (w, days) in daily.counts.chunks(settings.window_days).enumerate() {
        let mut rng = sequence_rng(settings.seed, w as u64);
        let mut events = Vec::new();
        for (d, row) in days.iter().enumerate() {
            for (county, &count) in row.iter().enumerate() {
                let kept = thin(count, settings.case_fraction, &mut rng)?;
                for _ in 0..kept {
                    let u: f64 = rng.random();
                    events.push(Event { t: d as f64 + u, node: county });
                }
            }
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        for i in 1..events.len() {
            if events[i].t <= events[i - 1].t {
                events[i].t = events[i - 1].t.next_up();
            }
        }
        sequences.push(EventSequence::new(events, horizon)?);
        window_starts.push(daily.start + chrono::Days::new((w * settings.window_days) as u64));
    }
    let n = sequences.len();
    let mut n_test = (n as f64 * settings.test_fraction).round() as usize;
    if settings.test_fraction > 0.0 && n > 1 {
        n_test = n_test.clamp(1, n - 1);
    }
    let test = sequences.split_off(n - n_test);
    let graph = table.graph()?;
    let bundle = |sequences: Vec<EventSequence>| {
        let events: usize = sequences.iter().map(|s| s.len()).sum();
        let windows = sequences.len().max(1) as f64;
        DatasetBundle {
            graph: graph.clone(),
            p0: None,
            lambda: events as f64 / (windows * horizon),
            horizon,
            sequences,
            seed: settings.seed,
        }
    };
    Ok(CovidSplit {
        train: bundle(sequences),
        test: bundle(test),
        window_starts,
    })
}

fn thin(count: u64, fraction: f64, rng: &mut impl Rng) -> Result<u64> {
    if fraction >= 1.0 || count == 0 {
        return Ok(count);
    }
    let b = Binomial::new(count, fraction).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(b.sample(rng))
}
