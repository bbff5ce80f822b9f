//! Crate-wide error wrapping every module error.

use std::fmt::Debug;

use crate::chaincode::ChaincodeError;
use crate::fedcore::FedError;
use crate::harness::{CorpusError, HarnessError};
use crate::identity::IdentityError;
use crate::ledger::LedgerError;
use crate::tinylm::ModelError;
use crate::unlearner::UnlearnError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Chaincode(#[from] ChaincodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Leading identifier of a `Debug` rendering, i.e. the variant name.
fn variant<T: Debug>(e: &T) -> String {
    format!("{e:?}")
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
        .collect()
}

fn qualified<T: Debug>(ty: &str, e: &T) -> String {
    format!("{ty}::{}", variant(e))
}

fn ledger_name(e: &LedgerError) -> String {
    qualified("LedgerError", e)
}

fn model_name(e: &ModelError) -> String {
    qualified("ModelError", e)
}

fn identity_name(e: &IdentityError) -> String {
    match e {
        IdentityError::Ledger(l) => ledger_name(l),
        _ => qualified("IdentityError", e),
    }
}

fn chaincode_name(e: &ChaincodeError) -> String {
    match e {
        ChaincodeError::Ledger(l) => ledger_name(l),
        ChaincodeError::Model(m) => model_name(m),
        _ => qualified("ChaincodeError", e),
    }
}

fn fed_name(e: &FedError) -> String {
    match e {
        FedError::Chaincode(c) => chaincode_name(c),
        FedError::Identity(i) => identity_name(i),
        FedError::Model(m) => model_name(m),
        _ => qualified("FedError", e),
    }
}

fn unlearn_name(e: &UnlearnError) -> String {
    match e {
        UnlearnError::Model(m) => model_name(m),
        UnlearnError::Fed(f) => fed_name(f),
        _ => qualified("UnlearnError", e),
    }
}

fn harness_name(e: &HarnessError) -> String {
    match e {
        HarnessError::Corpus(c) => qualified::<CorpusError>("CorpusError", c),
        HarnessError::Fed(f) => fed_name(f),
        HarnessError::Unlearn(u) => unlearn_name(u),
        HarnessError::Chaincode(c) => chaincode_name(c),
        HarnessError::Ledger(l) => ledger_name(l),
        _ => qualified("HarnessError", e),
    }
}

impl Error {
    /// `Type::Variant` of the innermost module error, e.g.
    /// `"ChaincodeError::AuthError"`.
    pub fn name(&self) -> String {
        match self {
            Error::Ledger(e) => ledger_name(e),
            Error::Identity(e) => identity_name(e),
            Error::Chaincode(e) => chaincode_name(e),
            Error::Model(e) => model_name(e),
            Error::Fed(e) => fed_name(e),
            Error::Unlearn(e) => unlearn_name(e),
            Error::Harness(e) => harness_name(e),
        }
    }
}
