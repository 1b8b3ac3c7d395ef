//! Record of everything that crosses a client boundary.

use serde::{Deserialize, Serialize};

use crate::distbank::BankEntry;
use crate::error::Result;
use crate::tape::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Server,
    Client(u32),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Server => f.write_str("server"),
            Endpoint::Client(id) => write!(f, "client{id}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    ModelParams,
    BankEntry,
}

/// Every message type that may leave a client. There is deliberately no
/// variant able to carry an image or a phase array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    ModelParams { params: Vec<(String, Tensor<f32>)> },
    BankEntry(BankEntry),
}

impl Message {
    pub fn model(params: &ParamSet<f32>) -> Self {
        Message::ModelParams {
            params: params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self {
            Message::ModelParams { .. } => MessageKind::ModelParams,
            Message::BankEntry(_) => MessageKind::BankEntry,
        }
    }

    /// Size when shipped as float32 values plus ids.
    pub fn wire_bytes(&self) -> usize {
        match self {
            Message::ModelParams { params } => params.iter().map(|(n, t)| n.len() + 4 * t.numel()).sum(),
            Message::BankEntry(e) => e.payload_bytes(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub kind: MessageKind,
    pub bytes: usize,
    /// Encoded message, kept only when payload recording is on.
    #[serde(skip)]
    pub payload: Option<Vec<u8>>,
}

/// Append-only message log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MessageLedger {
    entries: Vec<LedgerEntry>,
    record_payloads: bool,
}

impl MessageLedger {
    pub fn new(record_payloads: bool) -> Self {
        Self {
            entries: Vec::new(),
            record_payloads,
        }
    }

    pub fn record(&mut self, round: usize, sender: Endpoint, receiver: Endpoint, msg: &Message) -> Result<()> {
        let payload = if self.record_payloads { Some(msg.encode()?) } else { None };
        self.entries.push(LedgerEntry {
            round,
            sender,
            receiver,
            kind: msg.kind(),
            bytes: msg.wire_bytes(),
            payload,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["round", "sender", "receiver", "kind", "bytes"])?;
        for e in &self.entries {
            let kind = match e.kind {
                MessageKind::ModelParams => "model_params",
                MessageKind::BankEntry => "bank_entry",
            };
            w.write_record([
                e.round.to_string(),
                e.sender.to_string(),
                e.receiver.to_string(),
                kind.to_string(),
                e.bytes.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
