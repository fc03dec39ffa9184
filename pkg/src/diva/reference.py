"""Published rotated-MNIST benchmark results, kept as reference constants
for reports and acceptance checks. Keys are test-domain indices
(angle / 15); values are (mean accuracy, standard error) in percent.
"""

# Fully supervised, five labeled training domains.
SUPERVISED_DIVA = {
    0: (93.5, 0.3),
    1: (99.3, 0.1),
    2: (99.1, 0.1),
    3: (99.2, 0.1),
    4: (99.3, 0.1),
    5: (93.0, 0.4),
}

SUPERVISED_AVG = (97.2, 1.3)

# Semi-supervised with k x the amount of unlabeled data per training domain.
UNLABELED_FACTOR = {
    1: {0: (93.8, 0.4), 1: (99.4, 0.1), 2: (99.3, 0.1), 3: (99.0, 0.2), 4: (99.4, 0.1), 5: (93.8, 0.4)},
    3: {0: (93.9, 0.5), 1: (99.5, 0.1), 2: (99.3, 0.1), 3: (99.2, 0.1), 4: (99.4, 0.1), 5: (93.8, 0.2)},
    5: {0: (93.2, 0.5), 1: (99.5, 0.1), 2: (99.3, 0.1), 3: (99.3, 0.1), 4: (99.4, 0.1), 5: (93.5, 0.4)},
    9: {0: (93.0, 0.4), 1: (99.6, 0.1), 2: (99.3, 0.1), 3: (99.3, 0.1), 4: (99.2, 0.2), 5: (93.2, 0.3)},
}

# Extra unlabeled domain, test domain 75 degrees:
# {unlabeled domain index: (supervised-only, semi-supervised)}.
EXTRA_DOMAIN_75 = {
    2: ((93.1, 0.5), (93.3, 0.4)),
    4: ((73.8, 0.8), (80.6, 1.1)),
}

# Single-latent-space VAE ablation with both auxiliary classifiers.
ABLATION_VAE = {
    0: (88.4, 0.5),
    1: (98.3, 0.1),
    2: (97.4, 0.2),
    3: (97.4, 0.4),
    4: (97.9, 0.2),
    5: (84.0, 0.3),
}
