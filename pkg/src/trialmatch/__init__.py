"""Match patients to clinical trials by hybrid retrieval and criterion-level eligibility scoring."""
