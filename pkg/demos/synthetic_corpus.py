"""
A synthetic online-judge corpus
===============================

Students attempt problems tagged with concepts. Success depends on concept
mastery, a drifting student skill and problem difficulty, and failed attempts
carry a verdict whose severity affects the next try. Each submission's code
embeds a 4-token signature whose order encodes the verdict.
"""

import collections

import numpy as np
from progkt import datamodel as dm

cfg = dm.SynthConfig(n_students=60, n_problems=30, n_concepts=8)
kb, events, roles, behaviors = dm.synth_generate(cfg, seed=1)

print(len(kb.problems), "problems,", len(kb.concepts), "concepts")
print(len(events), "submissions;", sum(r == "student" for r in roles.values()), "students,",
      sum(r == "staff" for r in roles.values()), "staff")

counts = collections.Counter(e.verdict.name for e in events)
for name, n in counts.most_common():
    print(f"  {name:22s} {n:6d}")

###############################################################################
# Filtering keeps students with at least 20 submissions, ordered in time.

seqs = dm.build_sequences(events, roles)
lengths = np.array([len(s.events) for s in seqs])
print(f"{len(seqs)} sequences kept, length min {lengths.min()} median {np.median(lengths):.0f}")

###############################################################################
# The verdict signature can be read off the code, which is an upper bound on
# what a code classifier can learn.

hits = np.mean([dm.marker_lookup(e.code) == e.verdict for e in events])
print(f"signature oracle accuracy {hits:.4f}")
print(events[0].code[:300])

###############################################################################
# Windows of 200 steps are what the model trains on.

w = dm.window_sequences(seqs, 200)
print("windows", w.problem.shape, "targets", int(w.target_mask.sum()))
