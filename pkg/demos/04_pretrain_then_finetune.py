"""SimCLR pre-training followed by noisy-label fine-tuning, against a baseline.

Takes about four minutes on one core. Pre-training never sees labels, so the
same checkpoint serves every noise rate.
"""
from noisylab.data import generate_synthetic, inject_noise
from noisylab.detection import find_label_errors, score_detection
from noisylab.encoders import Encoder, load_checkpoint
from noisylab.ssl import SslConfig, pretrain
from noisylab.training import FinetuneConfig, finetune, predict_probs

train = generate_synthetic(4, 200, 16, seed=0)
test = generate_synthetic(4, 100, 16, seed=1)
seed, eta = 0, 0.4

res = pretrain(Encoder(seed=seed), None, train, SslConfig(epochs=15, milestones=()), seed)
print("NT-Xent per epoch:", [round(v, 3) for v in res.loss_trace])

noisy_train = inject_noise(train, eta, seed)
noisy_test = inject_noise(test, eta, seed + 1)
for arm, encoder in (("baseline", Encoder(seed=seed)), ("simclr", load_checkpoint(res.checkpoints[15])[0])):
    ft = finetune(encoder, noisy_train, FinetuneConfig(epochs=10), seed, test)
    probs = predict_probs(ft.encoder, ft.head, test.images, ft.norm)
    rep = score_detection(find_label_errors(probs, noisy_test.noisy_labels), noisy_test.corrupted_mask)
    print(f"{arm:8s} clean-test accuracy {ft.test_accuracy[-1]:.1f}%  detection F1 {rep.f1:.3f}  BA {rep.balanced_accuracy:.3f}")
