"""Simulation and exact auditing of privacy-preserving ad measurement APIs.

Modules:
  core: keys, reports, source and trigger registrations.
  noise: discrete Laplace sampling, truncation threshold, exact pmf.
  sr_clients: summary-report clients (attribution and shared storage).
  aggregation: aggregation service and per-report budget ledger.
  interactive: interactive mechanisms, transcripts and privacy filters.
  summary_mechanism: end-to-end summary mechanism and rollout accounting.
  event_mechanism: event-level client, output sets, randomized response.
  dp_audit: exact hockey-stick audits.
  cli: scenario runner.
"""

__version__ = "0.1.0"
