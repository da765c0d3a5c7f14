"""Information-theoretic co-training of paired window encoders.

Two recurrent encoders look at opposite halves of the same stretch of a
sequence: one summarizes the future half into a distribution over discrete
symbols, the other predicts that distribution from the past half. Training
pushes up a lower bound on the mutual information between the two halves,
measured in bits. The package ships a from-scratch differentiable core, the
trainer (with dead-symbol cloning), an evaluation suite, a synthetic corpus
generator with an exact mutual-information oracle, and a command line.
"""

__version__ = "0.1.0"
