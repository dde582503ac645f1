"""Slot-wise arithmetic on encrypted vectors.

Two integer vectors are packed into the slots of one plaintext each,
encrypted, added and multiplied under encryption, then decrypted. The noise
budget shows how much headroom is left after each operation.
"""

import numpy as np

from hers import fv
from hers.codec import batch_decode, batch_encode
from hers.ring import make_rng, testing_params


def main():
    params = testing_params(1024)  # small insecure ring, fast enough to explore
    rng = make_rng(0)
    sk, pk, ev = fv.keygen(params, rng)
    print(f"ring n={params.n}, t={params.t}, q has {params.logq_bits} bits over {len(params.q_primes)} primes")

    a = rng.integers(-500, 500, params.n)
    b = rng.integers(-500, 500, params.n)
    ca = fv.encrypt(batch_encode(a, params), pk, rng)
    cb = fv.encrypt(batch_encode(b, params), pk, rng)
    print(f"fresh ciphertext: {ca.nbytes} bytes, noise budget {fv.noise_budget(ca, sk)} bits")

    total = fv.cipher_add(ca, cb)
    prod = fv.cipher_multiply(ca, cb, ev)
    got_sum = batch_decode(fv.decrypt(total, sk), params)
    got_prod = batch_decode(fv.decrypt(prod, sk), params)
    print(f"sum exact: {np.array_equal(got_sum, a + b)}, budget {fv.noise_budget(total, sk)} bits")
    print(f"product exact: {np.array_equal(got_prod, a * b)}, budget {fv.noise_budget(prod, sk)} bits")

    # rotating the slots needs Galois keys
    rk = fv.rotation_keygen(sk, [1], rng)
    rolled = batch_decode(fv.decrypt(fv.rotate_slots(ca, 1, rk), sk), params)
    print("first slots before rotation:", a[:6].tolist())
    print("first slots after rotation: ", rolled[:6].tolist())


if __name__ == "__main__":
    main()
