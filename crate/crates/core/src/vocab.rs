//! Character-level vocabulary with four reserved ids.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const N_RESERVED: usize = 4;

/// Printable symbols after the reserved ids, in id order.
pub const CHARSET: &str = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ+=|";

pub fn vocab_size() -> usize {
    N_RESERVED + CHARSET.chars().count()
}

pub fn is_reserved(id: u32) -> bool {
    (id as usize) < N_RESERVED
}

pub fn encode_char(c: char) -> Option<u32> {
    CHARSET
        .chars()
        .position(|x| x == c)
        .map(|p| (p + N_RESERVED) as u32)
}

pub fn encode(s: &str) -> Option<Vec<u32>> {
    s.chars().map(encode_char).collect()
}

pub fn decode_id(id: u32) -> char {
    match id {
        PAD => '_',
        BOS => '^',
        EOS => '$',
        MASK => '?',
        _ => CHARSET
            .chars()
            .nth(id as usize - N_RESERVED)
            .unwrap_or('\u{fffd}'),
    }
}

/// Render ids for display; reserved ids become `_ ^ $ ?`.
pub fn render(ids: &[u32]) -> String {
    ids.iter().map(|&i| decode_id(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_size() {
        assert_eq!(vocab_size(), 69);
        let ids = encode("17+25=").unwrap();
        assert_eq!(render(&ids), "17+25=");
        assert!(encode("é").is_none());
        assert!(ids.iter().all(|&i| !is_reserved(i)));
    }
}
