"""IPA: information-preserving input projections for low-rank adaptation."""
