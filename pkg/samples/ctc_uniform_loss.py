import numpy as np

from sttpersonal.ctc import ctc_loss, greedy_decode

print(ctc_loss(np.zeros((2, 2)), [0]).loss)
print(greedy_decode(np.eye(3)[[0, 2, 0]]))
