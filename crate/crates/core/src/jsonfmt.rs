//! JSON serialization with reproducible float formatting: every float is
//! written with 9 significant digits in scientific notation, so identical
//! runs emit byte-identical reports.

use std::io;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Default)]
pub struct SigFigFormatter;

impl serde_json::ser::Formatter for SigFigFormatter {
    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.8e}")
    }

    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.8e}")
    }
}

/// Serializes with fixed key order (struct order) and 9-significant-digit
/// floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigFigFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Format(format!("json encode: {e}")))?;
    String::from_utf8(out).map_err(|e| Error::Format(format!("json encode produced non-utf8: {e}")))
}
