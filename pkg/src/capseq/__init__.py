"""capseq: two-stage chest X-ray report generation at desk scale.

An attention-LSTM caption model reads an X-ray and writes a short seed
report; a small decoder-only transformer language model continues it. The
package also ships the report preprocessing pipeline, byte-level BPE and
word vocabularies, greedy/beam decoding, and the BLEU/ROUGE-L/CIDEr
evaluation suite used to score generated reports.
"""

__version__ = "0.1.0"
