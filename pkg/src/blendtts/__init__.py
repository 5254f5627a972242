"""Multi-speaker seq2seq TTS workbench.

Subpackages cover the full experimental loop: text frontend, mel/mu-law
feature extraction, acoustic model and neural vocoder, speaker-blend
dataset construction, attention stability auditing, and MUSHRA listening
test assembly, hosting and statistical analysis.
"""

__version__ = "0.1.0"
