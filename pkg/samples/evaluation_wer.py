from sttpersonal.evaluation import wer

breakdown = wer("the cat sat", "the cat")
print((breakdown.substitutions, breakdown.deletions, breakdown.insertions, breakdown.wer_percent))
