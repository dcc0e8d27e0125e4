//! Ballots from per-patch retrievals and instant-runoff tabulation.
//!
//! Every (query patch, mIF channel) cell yields one equal-weight ballot: the
//! distinct source slides of its top-k hits, best first. Instant-runoff is
//! run to completion so the elimination order gives a full ranking.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Hit;

/// Preference order over slide ids, most similar first, without repeats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ballot(Vec<String>);

impl Ballot {
    /// Builds a ballot keeping each slide's first occurrence. Returns `None`
    /// when no candidates remain.
    pub fn from_preferences<I, S>(prefs: I) -> Option<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = BTreeSet::new();
        let order: Vec<String> = prefs
            .into_iter()
            .map(Into::into)
            .filter(|s| seen.insert(s.clone()))
            .collect();
        (!order.is_empty()).then_some(Self(order))
    }

    pub fn preferences(&self) -> &[String] {
        &self.0
    }
}

/// One ballot per (query patch, channel); `None` marks a cell where nothing
/// was retrieved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteMatrix {
    /// Grid position `(row, col)` of each query patch, one per matrix row.
    pub patches: Vec<(usize, usize)>,
    /// Indexed channel of each matrix column.
    pub channels: Vec<usize>,
    pub cells: Vec<Vec<Option<Ballot>>>,
}

/// Export record for a single cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteCell {
    pub patch: [usize; 2],
    pub channel: usize,
    pub ballot: Vec<String>,
}

impl VoteMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.patches.len(), self.channels.len())
    }

    /// Non-empty ballots in row-major order.
    pub fn ballots(&self) -> Vec<Ballot> {
        self.cells.iter().flatten().flatten().cloned().collect()
    }

    pub fn ballot_count(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    /// Flat list of `{patch: [row, col], channel, ballot}` records; empty
    /// cells export an empty ballot.
    pub fn export(&self) -> Vec<VoteCell> {
        let mut out = Vec::with_capacity(self.patches.len() * self.channels.len());
        for (&(r, c), row) in self.patches.iter().zip(&self.cells) {
            for (&channel, cell) in self.channels.iter().zip(row) {
                out.push(VoteCell {
                    patch: [r, c],
                    channel,
                    ballot: cell.as_ref().map(|b| b.0.clone()).unwrap_or_default(),
                });
            }
        }
        out
    }
}

/// Turns per-(patch, channel) hit lists into ballots. `results[p][c]` must
/// be sorted best first.
pub fn collect_votes(patches: &[(usize, usize)], channels: &[usize], results: &[Vec<Vec<Hit>>]) -> Result<VoteMatrix> {
    if results.len() != patches.len() {
        return Err(Error::ShapeMismatch {
            expected: patches.len(),
            actual: results.len(),
        });
    }
    let cells = results
        .iter()
        .map(|row| {
            if row.len() != channels.len() {
                return Err(Error::ShapeMismatch {
                    expected: channels.len(),
                    actual: row.len(),
                });
            }
            Ok(row
                .iter()
                .map(|hits| Ballot::from_preferences(hits.iter().map(|h| h.source.slide_id.as_str())))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VoteMatrix {
        patches: patches.to_vec(),
        channels: channels.to_vec(),
        cells,
    })
}

/// First-choice tallies of one round and who was eliminated after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub tallies: BTreeMap<String, usize>,
    pub active_ballots: usize,
    pub eliminated: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrvOutcome {
    /// Winner first, then candidates in reverse elimination order.
    pub ranking: Vec<String>,
    pub rounds: Vec<Round>,
    /// First round (1-based) in which the winner held a strict majority.
    pub majority_round: usize,
    pub ballot_count: usize,
}

impl IrvOutcome {
    pub fn winner(&self) -> &str {
        &self.ranking[0]
    }

    /// Rounds a candidate took part in.
    pub fn rounds_survived(&self, candidate: &str) -> usize {
        self.rounds
            .iter()
            .position(|r| r.eliminated.as_deref() == Some(candidate))
            .map_or(self.rounds.len(), |i| i + 1)
    }
}

/// Instant-runoff over equal-weight ballots, run until one candidate is
/// left.
///
/// Each round counts first choices among surviving candidates. The
/// candidate with the fewest is eliminated; ties go to the one with fewer
/// appearances across all ballots, then to the lexicographically smallest
/// id. Ballots without a surviving candidate are exhausted. A candidate
/// holding a strict majority of active ballots can never be the one
/// eliminated, so the last survivor is the majority winner.
pub fn instant_runoff(ballots: &[Ballot]) -> Result<IrvOutcome> {
    if ballots.is_empty() {
        return Err(Error::NoBallots);
    }
    let mut appearances: BTreeMap<&str, usize> = BTreeMap::new();
    for b in ballots {
        for c in &b.0 {
            *appearances.entry(c.as_str()).or_default() += 1;
        }
    }
    let mut remaining: BTreeSet<&str> = appearances.keys().copied().collect();
    // index of each ballot's current preference
    let mut cursor = vec![0usize; ballots.len()];
    let mut rounds = Vec::new();
    let mut eliminated_order = Vec::new();
    let mut majority_round = None;

    loop {
        let mut tallies: BTreeMap<&str, usize> = remaining.iter().map(|c| (*c, 0)).collect();
        let mut active = 0;
        for (b, pos) in ballots.iter().zip(cursor.iter_mut()) {
            while *pos < b.0.len() && !remaining.contains(b.0[*pos].as_str()) {
                *pos += 1;
            }
            if let Some(c) = b.0.get(*pos) {
                *tallies.get_mut(c.as_str()).expect("surviving candidate") += 1;
                active += 1;
            }
        }
        if majority_round.is_none() && tallies.values().any(|&v| 2 * v > active) {
            majority_round = Some(rounds.len() + 1);
        }
        let mut round = Round {
            tallies: tallies.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            active_ballots: active,
            eliminated: None,
        };
        if remaining.len() == 1 {
            rounds.push(round);
            break;
        }
        let loser = *tallies
            .iter()
            .min_by(|a, b| {
                a.1.cmp(b.1)
                    .then(appearances[a.0].cmp(&appearances[b.0]))
                    .then(a.0.cmp(b.0))
            })
            .map(|(c, _)| c)
            .expect("at least two candidates");
        remaining.remove(loser);
        eliminated_order.push(loser.to_string());
        round.eliminated = Some(loser.to_string());
        rounds.push(round);
    }

    let winner = remaining.into_iter().next().expect("one survivor").to_string();
    let mut ranking = vec![winner];
    ranking.extend(eliminated_order.into_iter().rev());
    Ok(IrvOutcome {
        ranking,
        majority_round: majority_round.unwrap_or(rounds.len()),
        rounds,
        ballot_count: ballots.len(),
    })
}

/// A slide's place in the aggregated ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub slide_id: String,
    pub final_rank: usize,
    pub rounds_survived: usize,
    /// Share of non-empty ballots naming this slide first in round 1.
    pub first_choice_share: f64,
}

pub fn rank_with_outcome(votes: &VoteMatrix) -> Result<(Vec<RankedResult>, IrvOutcome)> {
    let ballots = votes.ballots();
    let outcome = instant_runoff(&ballots)?;
    let first = &outcome.rounds[0];
    let results = outcome
        .ranking
        .iter()
        .enumerate()
        .map(|(i, id)| RankedResult {
            slide_id: id.clone(),
            final_rank: i + 1,
            rounds_survived: outcome.rounds_survived(id),
            first_choice_share: first.tallies[id] as f64 / ballots.len() as f64,
        })
        .collect();
    Ok((results, outcome))
}

/// Flattens the matrix into equal-weight ballots and ranks slides by
/// instant-runoff.
pub fn rank_slides(votes: &VoteMatrix) -> Result<Vec<RankedResult>> {
    rank_with_outcome(votes).map(|(r, _)| r)
}
