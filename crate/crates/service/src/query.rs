//! Query responses shared by the HTTP handlers and the command line.

use serde::{Deserialize, Serialize};
use sigmine_core::eval::{run_query, QuerySet, RankedPrediction, Representation, SearchSpace};
use sigmine_core::store::{ShardedStore, SiteLookup};
use sigmine_core::{MihIndex, Result, Signature, VoxelCoord};

/// What a query starts from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryTarget {
    /// A location; resolved to the nearest stored site.
    Point(VoxelCoord),
    Signature(Signature),
}

/// The stored site a point resolved to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteResponse {
    pub x: u32,
    pub y: u32,
    pub z: u32,
    pub signature: String,
    pub distance_to_site: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub x: u32,
    pub y: u32,
    pub z: u32,
    pub distance: f64,
    pub rank: usize,
    /// Set on the probe site itself.
    pub self_match: bool,
}

impl MatchEntry {
    pub fn from_prediction(p: &RankedPrediction, probe: Option<VoxelCoord>) -> Self {
        MatchEntry {
            x: p.coord.x,
            y: p.coord.y,
            z: p.coord.z,
            distance: p.distance,
            rank: p.rank,
            self_match: probe == Some(p.coord),
        }
    }

    pub fn coord(&self) -> VoxelCoord {
        VoxelCoord::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    /// Present when the query was given as a point.
    pub site: Option<SiteResponse>,
    pub signature: String,
    pub k: usize,
    pub t: f64,
    /// Ordered by rank.
    pub matches: Vec<MatchEntry>,
    /// Number of matches returned; may be below `k` after suppression.
    pub ranked: usize,
}

impl From<SiteLookup> for SiteResponse {
    fn from(hit: SiteLookup) -> Self {
        SiteResponse {
            x: hit.record.coord.x,
            y: hit.record.coord.y,
            z: hit.record.coord.z,
            signature: hit.record.sig.to_string(),
            distance_to_site: hit.distance,
        }
    }
}

/// Resolves the target and runs an indexed, NMS-filtered top-`k` query.
pub fn query_response(
    store: &ShardedStore,
    index: &MihIndex,
    target: QueryTarget,
    k: usize,
    t: f64,
) -> Result<QueryResponse> {
    let (site, sig, source) = match target {
        QueryTarget::Point(p) => {
            let hit = store.lookup_signature(p)?;
            (Some(hit.into()), hit.record.sig, Some(hit.record.coord))
        }
        QueryTarget::Signature(s) => (None, s, None),
    };
    let q = QuerySet::new(source, Representation::Signature(sig));
    let ranking = run_query(SearchSpace::Index(index), &q, t, k)?;
    let matches: Vec<MatchEntry> = ranking.iter().map(|p| MatchEntry::from_prediction(p, source)).collect();
    Ok(QueryResponse {
        site,
        signature: sig.to_string(),
        k,
        t,
        ranked: matches.len(),
        matches,
    })
}
