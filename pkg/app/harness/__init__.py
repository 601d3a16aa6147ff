# Experiment program: scene corpus, ablation / fraction / noise studies and the CLI
