//! Slot wire format of the MPMC queue, bit-exact.
//!
//! A slot is one 64-byte line, modeled as eight composed values under
//! little-endian packing. Byte 0 is the metadata byte: bit 0 is the
//! used-bit, bit 1 the node-ownership bit (0 producer, 1 consumer), bits
//! 2..7 are zero. Bytes 1..63 carry the payload, so the first seven
//! payload bytes share word 0 with the metadata.

/// Words per slot.
pub const SLOT_WORDS: usize = 8;
/// Payload bytes per slot.
pub const PAYLOAD_BYTES: usize = 63;

/// Metadata bit: slot has been claimed/populated within its owner node.
pub const USED_BIT: u64 = 0b01;
/// Metadata bit: 0 = producer node owns the slot, 1 = consumer node.
pub const OWNER_BIT: u64 = 0b10;

/// Metadata byte of a slot's word 0.
pub fn meta_byte(word0: u64) -> u8 {
    (word0 & 0xFF) as u8
}

pub fn encode_slot(meta: u8, payload: &[u8; PAYLOAD_BYTES]) -> [u64; SLOT_WORDS] {
    let mut bytes = [0u8; 64];
    bytes[0] = meta;
    bytes[1..].copy_from_slice(payload);
    let mut words = [0u64; SLOT_WORDS];
    for (i, w) in words.iter_mut().enumerate() {
        *w = u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
    }
    words
}

pub fn decode_slot(words: &[u64; SLOT_WORDS]) -> (u8, [u8; PAYLOAD_BYTES]) {
    let mut bytes = [0u8; 64];
    for (i, w) in words.iter().enumerate() {
        bytes[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut payload = [0u8; PAYLOAD_BYTES];
    payload.copy_from_slice(&bytes[1..]);
    (bytes[0], payload)
}
