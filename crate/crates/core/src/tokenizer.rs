/// Byte-level tokenizer: ids 0..=255 are raw bytes, followed by specials.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const PAD: u32 = 258;
    pub const VOCAB_SIZE: usize = 259;

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Decodes byte ids, skipping specials. Invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter_map(|&id| u8::try_from(id).ok())
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_specials() {
        let tok = ByteTokenizer;
        let mut ids = vec![ByteTokenizer::BOS];
        ids.extend(tok.encode("Time 3s: né"));
        ids.push(ByteTokenizer::EOS);
        assert_eq!(tok.decode(&ids), "Time 3s: né");
    }
}
