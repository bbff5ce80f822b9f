//! Hashes, keys and signatures checked against values computed independently
//! with Python `hashlib` and `cryptography`.

use fedunlearn::identity::{generate_token, key_generator, verify_signature, Role};
use fedunlearn::ledger::{compute_block_hash, compute_t_id, ChainState, Hash32, TxKind};
use fedunlearn::tinylm::{Model, ModelConfig, Weights};

fn h(s: &str) -> Hash32 {
    Hash32::from_hex(s).unwrap()
}

const T_ID_A: &str = "432a2839f21ccbc2272b77164d15cba1e21d8a43d90c5b0344e01101c4a12a9b";
const T_ID_B: &str = "23d444bb849d049c16b1878e4650b90291d859cdc9829c47a7b25b4b19cd1ba5";
const BLOCK0: &str = "c1f713543fab216ab77f3617609606a8b23580cf16a5987e15f9b70525e2c202";
const BLOCK1: &str = "5861a3d02e36a1582eba4ee2ccb011d09659784e33330bf383268efa70470023";

#[test]
fn transaction_ids() {
    let d = Hash32::of(b"hello");
    assert_eq!(d, h("2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"));
    assert_eq!(compute_t_id(TxKind::Register, "client-0", &d, 46.0), h(T_ID_A));
    assert_eq!(
        compute_t_id(TxKind::AggregatedModel, "agent", &Hash32::of(&[0, 1, 2]), 79.5),
        h(T_ID_B)
    );
}

#[test]
fn block_hashes() {
    let (a, b) = (h(T_ID_A), h(T_ID_B));
    assert_eq!(compute_block_hash(0, &Hash32::ZERO, [a].iter()), h(BLOCK0));
    assert_eq!(compute_block_hash(1, &h(BLOCK0), [a, b].iter()), h(BLOCK1));
}

#[test]
fn live_chain_matches_reference() {
    let mut chain = ChainState::new();
    chain.submit_transaction(TxKind::Register, "client-0", b"hello".to_vec(), 46.0).unwrap();
    chain.seal_block().unwrap();
    chain.submit_transaction(TxKind::Register, "client-0", b"hello".to_vec(), 46.0).unwrap_err();
    chain.submit_transaction(TxKind::Register, "client-0", b"hello".to_vec(), 46.5).unwrap();
    assert_eq!(chain.blocks()[0].block_hash, h(BLOCK0));
    assert_eq!(chain.head_hash(), h(BLOCK0));
}

#[test]
fn ed25519_keys_and_signatures() {
    let kp = key_generator(42);
    assert_eq!(hex::encode(kp.s_k), "ff39de844960522d279bdb3dd0f2ca42e752d41d6ed7223dd76c77f8b0ed9e44");
    assert_eq!(hex::encode(kp.p_k), "89e586fa128c23344e6b0437147564a0084fc22fff79602f49637c315d2e72c0");
    let sig = kp.sign(b"abc");
    assert_eq!(
        hex::encode(sig),
        "8c824adac4adf11459e15924adc61054a1b58984d57e554a75dd8e871800170a\
         c4a3928e9d0113a18c227e70e608ce7a3e5b6744db19515a90515bb83cc6540e"
    );
    assert!(verify_signature(&kp.p_k, b"abc", &sig));
    assert!(!verify_signature(&kp.p_k, b"abd", &sig));
}

#[test]
fn token_wire_form() {
    let tok = generate_token(&key_generator(42), "client-0", Role::Client, 46.0, 3600.0).unwrap();
    assert_eq!(
        tok.encode(),
        "eyJhbGciOiJFZERTQSIsInR5cCI6IkpXVCJ9.\
         eyJleHAiOjM2NDYuMCwiaWF0Ijo0Ni4wLCJyb2xlIjoiQ2xpZW50Iiwic3ViIjoiY2xpZW50LTAifQ.\
         GUkJXcZoHBpwMh4YIhFQpkKHHklLdBL-pKvNvpjSWM4AiLTX-XtQoST6h97RlJTgzUOBZHrTBh8-Nn-KaltPCQ"
    );
}

#[test]
fn weights_and_model_digests() {
    let cfg = ModelConfig {
        vocab: 4,
        d_model: 2,
        d_ff: 3,
        max_len: 5,
        n_classes: 2,
        seed: 9,
    };
    let mut w = Weights::init(cfg).unwrap();
    assert_eq!(w.num_params(), 55);
    let flat: Vec<f64> = (0..55).map(|i| i as f64 * 0.25 - 1.0).collect();
    w.set_flat(&flat).unwrap();
    assert_eq!(
        Hash32::of(&w.to_bytes()),
        h("b471f0e3034bae038bdb1aa5e2e04eaa4feaaff740c824a5b8cbb8cdf7252443")
    );
    let m = Model::new(w, None).unwrap();
    assert_eq!(m.digest(), h("3d06c1882ec91ed8fea11bd933a22d126399d8415f605c45ef4d34537d72a487"));
}
