//! Per-layer shape records.
//!
//! A [`ShapeTrace`] is produced two independent ways: symbolically from a
//! config (`verify::trace_shapes`) and by instrumenting an actual forward
//! pass with a [`TraceRecorder`]. The wiring test is that both routes emit
//! identical record lists.

use crate::error::{Error, Result};

/// One operation: its name, kind, inputs as `(producer name, shape)`,
/// output shape, and owned parameter count.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub op: String,
    pub inputs: Vec<(String, [usize; 4])>,
    pub output: [usize; 4],
    pub params: usize,
}

/// Source name of the network input tensor; the only name a record may
/// reference without a producing record.
pub const INPUT: &str = "input";

/// Canonical op label for a convolution record, e.g. `conv3x3/s2+relu`.
/// The symbolic and executed trace routes must agree on these strings.
pub fn conv_op(k: usize, stride: usize, relu: bool) -> String {
    format!("conv{k}x{k}/s{stride}{}", if relu { "+relu" } else { "" })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize)]
pub struct ShapeTrace {
    pub records: Vec<LayerRecord>,
}

impl ShapeTrace {
    /// Checks referential consistency: unique names, and every input shape
    /// equal to its producer's output shape.
    pub fn validate(&self) -> Result<()> {
        let mut outputs: std::collections::HashMap<&str, [usize; 4]> =
            std::collections::HashMap::new();
        for rec in &self.records {
            for (src, shape) in &rec.inputs {
                if src == INPUT {
                    continue;
                }
                match outputs.get(src.as_str()) {
                    None => {
                        return Err(Error::Internal(format!(
                            "layer {} consumes {} before it is produced",
                            rec.name, src
                        )))
                    }
                    Some(out) if out != shape => {
                        return Err(Error::Internal(format!(
                            "layer {} expects {:?} from {}, which produces {:?}",
                            rec.name, shape, src, out
                        )))
                    }
                    Some(_) => {}
                }
            }
            if outputs.insert(&rec.name, rec.output).is_some() {
                return Err(Error::Internal(format!(
                    "duplicate layer name {} in trace",
                    rec.name
                )));
            }
        }
        Ok(())
    }

    pub fn total_params(&self) -> usize {
        self.records.iter().map(|r| r.params).sum()
    }

    /// Aligned text table, one row per record.
    pub fn render(&self) -> String {
        let mut name_w = 4;
        let mut op_w = 2;
        for r in &self.records {
            name_w = name_w.max(r.name.len());
            op_w = op_w.max(r.op.len());
        }
        let mut out = format!(
            "{:name_w$}  {:op_w$}  {:20}  {:17}  {:>12}\n",
            "name", "op", "input", "output", "params"
        );
        for r in &self.records {
            let input = match r.inputs.len() {
                0 => String::new(),
                1 => format_shape(r.inputs[0].1),
                n => format!("{} (+{} more)", format_shape(r.inputs[0].1), n - 1),
            };
            out.push_str(&format!(
                "{:name_w$}  {:op_w$}  {:20}  {:17}  {:>12}\n",
                r.name,
                r.op,
                input,
                format_shape(r.output),
                r.params
            ));
        }
        out
    }
}

fn format_shape(s: [usize; 4]) -> String {
    format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3])
}

/// Collects records during a forward pass. An `off` recorder skips all
/// bookkeeping so untraced runs pay nothing.
#[derive(Debug)]
pub struct TraceRecorder {
    enabled: bool,
    trace: ShapeTrace,
}

impl TraceRecorder {
    pub fn new() -> Self {
        Self {
            enabled: true,
            trace: ShapeTrace::default(),
        }
    }

    pub fn off() -> Self {
        Self {
            enabled: false,
            trace: ShapeTrace::default(),
        }
    }

    pub fn record(
        &mut self,
        name: &str,
        op: &str,
        inputs: &[(&str, [usize; 4])],
        output: [usize; 4],
        params: usize,
    ) {
        if !self.enabled {
            return;
        }
        self.trace.records.push(LayerRecord {
            name: name.to_string(),
            op: op.to_string(),
            inputs: inputs.iter().map(|(s, sh)| (s.to_string(), *sh)).collect(),
            output,
            params,
        });
    }

    pub fn finish(self) -> ShapeTrace {
        self.trace
    }
}

impl Default for TraceRecorder {
    fn default() -> Self {
        Self::new()
    }
}
