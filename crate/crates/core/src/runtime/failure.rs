use std::fmt;

use crate::heap::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailureKind {
    LogicError,
    EffectError,
    Overflow,
    MatchNonExhaustive,
    OutOfMemory,
    Timeout,
}

impl FailureKind {
    pub const ALL: [FailureKind; 6] = [
        FailureKind::LogicError,
        FailureKind::EffectError,
        FailureKind::Overflow,
        FailureKind::MatchNonExhaustive,
        FailureKind::OutOfMemory,
        FailureKind::Timeout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FailureKind::LogicError => "LogicError",
            FailureKind::EffectError => "EffectError",
            FailureKind::Overflow => "Overflow",
            FailureKind::MatchNonExhaustive => "MatchNonExhaustive",
            FailureKind::OutOfMemory => "OutOfMemory",
            FailureKind::Timeout => "Timeout",
        }
    }

    pub fn parse(s: &str) -> Option<FailureKind> {
        FailureKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a failure was raised: function name and statement index (pre-order
/// over the function body, from 0).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Origin {
    pub function: String,
    pub statement: u32,
}

/// A captured logic or effect error. Carries nothing host specific, so it
/// encodes identically everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FailureObject {
    pub kind: FailureKind,
    pub message: String,
    pub origin: Origin,
    pub cause: Option<Box<FailureObject>>,
}

impl FailureObject {
    pub fn new(kind: FailureKind, message: impl Into<String>, origin: Origin) -> FailureObject {
        FailureObject {
            kind,
            message: message.into(),
            origin,
            cause: None,
        }
    }

    /// The record programs and clients see:
    /// `{kind, message, origin: {function, statement}, cause}`.
    pub fn to_value(&self) -> Value {
        Value::record([
            ("kind", Value::str(self.kind.name())),
            ("message", Value::str(&self.message)),
            (
                "origin",
                Value::record([
                    ("function", Value::str(&self.origin.function)),
                    ("statement", Value::Int(self.origin.statement as i64)),
                ]),
            ),
            ("cause", self.cause.as_ref().map_or(Value::Unit, |c| c.to_value())),
        ])
    }

    pub fn from_value(v: &Value) -> Option<FailureObject> {
        let Value::Record(fields) = v else { return None };
        if fields.len() != 4 {
            return None;
        }
        let text = |k: &str| match v.field(k) {
            Some(Value::Str(s)) => Some(s.clone()),
            _ => None,
        };
        let origin = v.field("origin")?;
        let statement = match origin.field("statement") {
            Some(Value::Int(i)) => u32::try_from(*i).ok()?,
            _ => None?,
        };
        let function = match origin.field("function") {
            Some(Value::Str(s)) => s.clone(),
            _ => None?,
        };
        let cause = match v.field("cause")? {
            Value::Unit => None,
            c => Some(Box::new(FailureObject::from_value(c)?)),
        };
        Some(FailureObject {
            kind: FailureKind::parse(&text("kind")?)?,
            message: text("message")?,
            origin: Origin { function, statement },
            cause,
        })
    }

    /// Innermost failure of the cause chain.
    pub fn root_cause(&self) -> &FailureObject {
        let mut f = self;
        while let Some(c) = &f.cause {
            f = c;
        }
        f
    }
}

impl fmt::Display for FailureObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} (at {} statement {})",
            self.kind, self.message, self.origin.function, self.origin.statement
        )?;
        if let Some(c) = &self.cause {
            write!(f, "; caused by {c}")?;
        }
        Ok(())
    }
}
