//! Greedy branch selection for PDCNNs and the per-category model combiner.
//!
//! The search fixes the best architecture found so far and tries appending
//! one more branch of each candidate depth. It keeps the best extension only
//! if it strictly lowers the error, and stops otherwise.

use std::collections::BTreeMap;
use std::fmt;

use crate::arch::{build_pdcnn_with, ArchConfig, PdcnnSpec, MAX_BRANCHES};
use crate::data::Sample;
use crate::diag::sig6;
use crate::error::{Error, Result};
use crate::kv;
use crate::optim::{train, SgdConfig, TrainOptions};
use crate::tensor::mix_seed;

/// Scores a depth list with an error rate in [0, 1].
pub trait EvalOracle {
    /// `round` is 1-based; `candidate` indexes the candidate list of that round.
    fn evaluate(&mut self, depths: &[usize], round: usize, candidate: usize) -> Result<f64>;
}

/// Looks errors up in a fixed table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayOracle {
    table: BTreeMap<Vec<usize>, f64>,
}

impl ReplayOracle {
    pub fn new(table: BTreeMap<Vec<usize>, f64>) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::Domain("replay fixture is empty".into()));
        }
        if let Some((k, v)) = table.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!(
                "error {v} for [{}] is outside [0, 1]",
                kv::join(k)
            )));
        }
        Ok(ReplayOracle { table })
    }

    pub fn from_pairs(pairs: &[(&[usize], f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|(d, e)| (d.to_vec(), *e)).collect())
    }

    /// Parses a `depths,error` CSV; the depths field may be quoted `"4,3"` or use `;`, `-` or spaces.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut table = BTreeMap::new();
        let mut header = false;
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            if !header {
                if row.iter().map(str::trim).collect::<Vec<_>>() != ["depths", "error"] {
                    return Err(Error::Parse {
                        line,
                        msg: "expected header depths,error".into(),
                    });
                }
                header = true;
                continue;
            }
            if row.len() != 2 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 2 columns, found {}", row.len()),
                });
            }
            let depths = parse_depths(&row[0]).map_err(|msg| Error::Parse { line, msg })?;
            let err: f64 = row[1].trim().parse().map_err(|e| Error::Parse {
                line,
                msg: format!("error: {e}"),
            })?;
            table.insert(depths, err);
        }
        ReplayOracle::new(table)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Parses `4,3,4`, `4;3;4`, `4-3-4` or `4 3 4`.
pub fn parse_depths(s: &str) -> std::result::Result<Vec<usize>, String> {
    let parts: Vec<&str> = s
        .split(|c: char| c == ',' || c == ';' || c == '-' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .collect();
    if parts.is_empty() {
        return Err("empty depth list".into());
    }
    parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|e| format!("depth {p:?}: {e}")))
        .collect()
}

impl EvalOracle for ReplayOracle {
    fn evaluate(&mut self, depths: &[usize], _round: usize, _candidate: usize) -> Result<f64> {
        self.table.get(depths).copied().ok_or_else(|| Error::Oracle {
            depths: kv::join(depths),
            msg: "not in replay fixture".into(),
        })
    }
}

/// Trains each candidate on a fixed split and reports its best test error.
///
/// The run for (round, candidate) is seeded from `mix(seed, round, candidate)`.
pub struct TrainingOracle<'a> {
    pub train: &'a [Sample],
    pub test: &'a [Sample],
    pub arch: ArchConfig,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl EvalOracle for TrainingOracle<'_> {
    fn evaluate(&mut self, depths: &[usize], round: usize, candidate: usize) -> Result<f64> {
        let spec = build_pdcnn_with(depths, None, &self.arch)?;
        let seed = mix_seed(self.seed, &[round as u64, candidate as u64]);
        let out = train(spec, self.train, self.test, &self.sgd, seed, &TrainOptions::default())?;
        out.best_test_error.ok_or_else(|| Error::Oracle {
            depths: kv::join(depths),
            msg: "training ran no epochs".into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateResult {
    /// The appended depth.
    pub depth: usize,
    /// Full depth list evaluated.
    pub depths: Vec<usize>,
    pub error: f64,
    pub chosen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchRound {
    /// 1-based.
    pub round: usize,
    pub candidates: Vec<CandidateResult>,
    /// True when no candidate beat the incumbent and the search ended here.
    pub stopped: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchTrace {
    pub rounds: Vec<SearchRound>,
    pub winner: Vec<usize>,
    pub winner_error: Option<f64>,
}

impl SearchTrace {
    pub fn best_spec(&self, cfg: &ArchConfig) -> Result<PdcnnSpec> {
        build_pdcnn_with(&self.winner, None, cfg)
    }

    /// `round,candidate_depths,error,chosen` rows, then `winner,<depths>,<error>,`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut put = |fields: [String; 4]| w.write_record(&fields).expect("writing to a Vec cannot fail");
        put(["round", "candidate_depths", "error", "chosen"].map(String::from));
        for r in &self.rounds {
            for c in &r.candidates {
                let chosen = if c.chosen {
                    "yes"
                } else if r.stopped {
                    "stop"
                } else {
                    "no"
                };
                put([r.round.to_string(), kv::join(&c.depths), sig6(c.error), chosen.into()]);
            }
        }
        put([
            "winner".into(),
            kv::join(&self.winner),
            self.winner_error.map(sig6).unwrap_or_default(),
            String::new(),
        ]);
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is UTF-8")
    }
}

/// A failed search, with every round completed before the failure.
#[derive(Debug)]
pub struct SearchError {
    pub source: Error,
    pub partial: SearchTrace,
}

impl fmt::Display for SearchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "search failed after {} rounds: {}",
            self.partial.rounds.len(),
            self.source
        )
    }
}

impl std::error::Error for SearchError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    pub max_branches: usize,
    /// An extension must lower the error by more than this to be accepted.
    pub min_improvement: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            max_branches: MAX_BRANCHES,
            min_improvement: 0.0,
        }
    }
}

/// Index of the best candidate: lowest error, then smaller depth, then earlier position.
fn pick(results: &[CandidateResult]) -> usize {
    let mut best = 0;
    for (i, c) in results.iter().enumerate().skip(1) {
        let b = &results[best];
        if c.error < b.error || (c.error == b.error && c.depth < b.depth) {
            best = i;
        }
    }
    best
}

pub fn greedy_pdcnn_search(
    candidates: &[usize],
    oracle: &mut dyn EvalOracle,
    opts: SearchOptions,
) -> std::result::Result<SearchTrace, SearchError> {
    let mut trace = SearchTrace::default();
    let fail = |source: Error, partial: SearchTrace| SearchError { source, partial };
    if candidates.is_empty() {
        return Err(fail(Error::Domain("no candidate depths".into()), trace));
    }
    if opts.max_branches == 0 || opts.max_branches > MAX_BRANCHES {
        return Err(fail(
            Error::Domain(format!(
                "max_branches must be in 1..={MAX_BRANCHES}, got {}",
                opts.max_branches
            )),
            trace,
        ));
    }
    let mut incumbent: Vec<usize> = Vec::new();
    let mut incumbent_error = f64::INFINITY;
    for round in 1..=opts.max_branches {
        let mut results = Vec::with_capacity(candidates.len());
        for (ci, &d) in candidates.iter().enumerate() {
            let mut depths = incumbent.clone();
            depths.push(d);
            match oracle.evaluate(&depths, round, ci) {
                Ok(error) => results.push(CandidateResult {
                    depth: d,
                    depths,
                    error,
                    chosen: false,
                }),
                Err(e) => return Err(fail(e, trace)),
            }
        }
        let best = pick(&results);
        let improves = round == 1 || results[best].error < incumbent_error - opts.min_improvement;
        if improves {
            results[best].chosen = true;
            incumbent = results[best].depths.clone();
            incumbent_error = results[best].error;
        }
        trace.rounds.push(SearchRound {
            round,
            candidates: results,
            stopped: !improves,
        });
        trace.winner = incumbent.clone();
        trace.winner_error = Some(incumbent_error);
        if !improves {
            break;
        }
    }
    Ok(trace)
}

/// category -> model -> accuracy.
pub type CategoryTable = BTreeMap<String, BTreeMap<String, f64>>;

/// For each category, the listed model with the highest accuracy (earlier models win ties).
pub fn per_category_combine(table: &CategoryTable, models: &[&str]) -> Result<BTreeMap<String, String>> {
    if models.is_empty() {
        return Err(Error::Contract("no models to combine".into()));
    }
    let mut out = BTreeMap::new();
    for (cat, row) in table {
        let mut best: Option<(&str, f64)> = None;
        for &m in models {
            let acc = *row
                .get(m)
                .ok_or_else(|| Error::Contract(format!("no accuracy for ({cat}, {m})")))?;
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::Domain(format!(
                    "accuracy {acc} for ({cat}, {m}) is outside [0, 1]"
                )));
            }
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((m, acc));
            }
        }
        out.insert(cat.clone(), best.map(|(m, _)| m.to_string()).unwrap_or_default());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_branch() -> ReplayOracle {
        ReplayOracle::from_pairs(&[(&[3], 0.09916), (&[4], 0.08571), (&[5], 0.09832)]).unwrap()
    }

    #[test]
    fn single_round_picks_arch2() {
        let t = greedy_pdcnn_search(
            &[3, 4, 5],
            &mut single_branch(),
            SearchOptions {
                max_branches: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(t.winner, vec![4]);
        assert_eq!(t.rounds.len(), 1);
    }

    #[test]
    fn lookup_miss() {
        let mut o = ReplayOracle::from_pairs(&[(&[4], 0.1)]).unwrap();
        assert_eq!(o.evaluate(&[4], 1, 0).unwrap(), 0.1);
        assert!(matches!(o.evaluate(&[3], 1, 0), Err(Error::Oracle { .. })));
        assert!(ReplayOracle::new(BTreeMap::new()).is_err());
    }

    #[test]
    fn failure_keeps_partial_trace() {
        let err = greedy_pdcnn_search(&[3, 4, 5], &mut single_branch(), SearchOptions::default()).unwrap_err();
        assert_eq!(err.partial.rounds.len(), 1);
        assert_eq!(err.partial.winner, vec![4]);
    }

    #[test]
    fn ties_prefer_smaller_depth() {
        let mut o = ReplayOracle::from_pairs(&[(&[5], 0.1), (&[3], 0.1), (&[4], 0.2)]).unwrap();
        let t = greedy_pdcnn_search(
            &[5, 4, 3],
            &mut o,
            SearchOptions {
                max_branches: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(t.winner, vec![3]);
    }

    #[test]
    fn equal_error_extension_stops() {
        let mut o = ReplayOracle::from_pairs(&[(&[4], 0.1), (&[4, 4], 0.1)]).unwrap();
        let t = greedy_pdcnn_search(&[4], &mut o, SearchOptions::default()).unwrap();
        assert_eq!(t.winner, vec![4]);
        assert!(t.rounds[1].stopped);
    }

    #[test]
    fn parse_fixture() {
        let o = ReplayOracle::parse_csv("depths,error\n4,0.08571\n\"4,3\",0.082353\n4;3;4,0.079832\n").unwrap();
        assert_eq!(o.len(), 3);
        assert!(ReplayOracle::parse_csv("depths,error\n4,x\n").is_err());
        assert!(ReplayOracle::parse_csv("d,e\n").is_err());
    }

    #[test]
    fn combiner() {
        let mut t = CategoryTable::new();
        t.insert(
            "night".into(),
            [("2-PDCNN".to_string(), 0.8966), ("3-PDCNN".to_string(), 0.8839)].into(),
        );
        t.insert(
            "landscape".into(),
            [("2-PDCNN".to_string(), 0.9366), ("3-PDCNN".to_string(), 0.9500)].into(),
        );
        t.insert(
            "tie".into(),
            [("2-PDCNN".to_string(), 0.9), ("3-PDCNN".to_string(), 0.9)].into(),
        );
        let c = per_category_combine(&t, &["2-PDCNN", "3-PDCNN"]).unwrap();
        assert_eq!(c["night"], "2-PDCNN");
        assert_eq!(c["landscape"], "3-PDCNN");
        assert_eq!(c["tie"], "2-PDCNN");
        assert!(matches!(
            per_category_combine(&t, &["2-PDCNN", "4-PDCNN"]),
            Err(Error::Contract(_))
        ));
    }
}
