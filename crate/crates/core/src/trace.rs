//! JSON-lines decode traces: one header object, then one object per step.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::decoder::{DecodeResult, StepRecord};
use crate::oracle::CostModel;
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub prompt_len: usize,
    pub n: usize,
    pub k: usize,
    pub oracle: serde_json::Value,
    pub cost_model: CostModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub step: usize,
    pub drafted: Vec<TokenId>,
    pub levels: Vec<usize>,
    pub accepted: usize,
    pub committed: Vec<TokenId>,
    pub batch: usize,
    pub sim_time: f64,
}

impl From<&StepRecord> for TraceLine {
    fn from(s: &StepRecord) -> Self {
        Self {
            step: s.step_index,
            drafted: s.drafted.clone(),
            levels: s.draft_levels.clone(),
            accepted: s.accepted_count,
            committed: s.committed_this_step.clone(),
            batch: s.verify_batch_len,
            sim_time: s.sim_time,
        }
    }
}

pub fn write_trace<W: Write>(
    mut out: W,
    header: &TraceHeader,
    result: &DecodeResult,
) -> io::Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for step in &result.steps {
        serde_json::to_writer(&mut out, &TraceLine::from(step))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace<R: BufRead>(input: R) -> io::Result<(TraceHeader, Vec<TraceLine>)> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty trace"))??;
    let header: TraceHeader = serde_json::from_str(&first)?;
    let mut steps = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            steps.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{anpd_decode, DecodeOptions};
    use crate::oracle::ReplayOracle;

    #[test]
    fn trace_round_trip() {
        let prompt = vec![1, 2, 3, 1, 2];
        let mut o = ReplayOracle::new(prompt.clone(), vec![3, 1, 2, 3, 1, 2, 4], 0).unwrap();
        let opts = DecodeOptions {
            n_max: 3,
            k_draft: 3,
            max_new_tokens: 7,
            ..DecodeOptions::default()
        };
        let r = anpd_decode(&mut o, &prompt, &opts, &CostModel::default()).unwrap();
        let header = TraceHeader {
            prompt_len: prompt.len(),
            n: 3,
            k: 3,
            oracle: serde_json::json!({"kind": "replay"}),
            cost_model: CostModel::default(),
        };
        let mut buf = Vec::new();
        write_trace(&mut buf, &header, &r).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"prompt_len":5,"n":3,"k":3,"oracle":{"kind":"replay"},"cost_model":"#));
        assert!(text.lines().nth(1).unwrap().starts_with(r#"{"step":0,"drafted":"#));
        let (h, steps) = read_trace(&buf[..]).unwrap();
        assert_eq!(h, header);
        assert_eq!(steps.len(), r.steps.len());
        let committed: Vec<TokenId> = steps.iter().flat_map(|s| s.committed.clone()).collect();
        assert_eq!(committed, r.output);
    }
}
