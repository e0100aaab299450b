"""
Enrolling users and verifying a gesture code
============================================

Build per-gesture templates for three synthetic users, then check a
three-gesture code from the genuine user and from someone who knows it.
"""

import numpy as np

from emgauth import CodeSequence, FOREARM, enroll, extract_series, fuse, normalize_weights, score_attempt
from emgauth.fusion import certainty_from_score
from emgauth.synthgen import SynthConfig, profiles, synthesize_record

cfg = SynthConfig(subject_count=3, sample_count=2048, channel_count=8, separation=0.5,
                  session_drift=0.2, noise_level=0.2, rng_seed=4)
people = profiles(cfg)


def series(user, gesture, session, trial):
    return extract_series(synthesize_record(cfg, people[user], session, gesture, trial), FOREARM)


code = CodeSequence((3, 9, 14))

# enrollment: six trials of day 1, the seventh is kept for threshold setting
templates = {}
for user in people:
    for g in code:
        vecs = np.concatenate([series(user, g, 1, t).vectors for t in range(1, 7)])
        templates[user, g] = enroll(vecs, user, g)

# threshold per template: halfway between the held-out genuine score and the
# closest other user on the same gesture
for (user, g), tmpl in list(templates.items()):
    own = score_attempt(series(user, g, 1, 7), tmpl).value
    other = min(score_attempt(series(k, g, 1, 7), tmpl).value for k in people if k != user)
    templates[user, g] = tmpl.with_threshold((own + other) / 2)
    print(f"user {user} gesture {g:2d}: genuine {own:6.1f}  nearest impostor {other:6.1f}")

# made-up per-gesture accuracies; better codes get a larger say
weights = normalize_weights({3: 0.9, 9: 0.7, 14: 0.8}, code)
print("weights:", np.round(weights.normalized, 3))


def attempt(claimed, actual):
    d = [certainty_from_score(score_attempt(series(actual, g, 2, 1), templates[claimed, g]),
                              templates[claimed, g].threshold) for g in code]
    return fuse(d, weights)


for actual in people:
    out = attempt(1, actual)
    verdict = "ACCEPT" if out.accepted else "REJECT"
    print(f"claim user 1, performed by user {actual}: d={out.per_code_certainty} g={out.discriminant:.3f} {verdict}")
