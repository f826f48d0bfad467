"""Connectivity-matrix fingerprints and explainable property regression."""

__version__ = "0.1.0"

from .smiles import MolecularGraph, SmilesError, add_explicit_hydrogens, molecule_from_smiles, parse_smiles
from .featurize import (
    FeatureVocabulary,
    build_connectivity_matrix,
    build_feature_matrix,
    build_vocabulary,
    enumerate_environments,
    featurize_molecule,
)
from .linalg import determinant, jacobi_eigenvalues as eigenvalues

__all__ = [
    "MolecularGraph",
    "SmilesError",
    "add_explicit_hydrogens",
    "molecule_from_smiles",
    "parse_smiles",
    "FeatureVocabulary",
    "build_connectivity_matrix",
    "build_feature_matrix",
    "build_vocabulary",
    "enumerate_environments",
    "featurize_molecule",
    "determinant",
    "eigenvalues",
]
