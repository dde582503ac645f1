"""How much do raw similarity scores reveal about a query?

Someone holding the gallery in plaintext and seeing the scores of m templates
can solve a least-squares system for the query. With m >= d the recovery is
essentially perfect; with fewer templates it degrades. An encrypted gallery
offers no matrix to solve against.
"""

from hers import analysis
from hers.ring import make_rng


def main():
    d = 64
    rows = analysis.recovery_curve(d, [0.125, 0.25, 0.5, 1, 2, 4], trials=20, rng=make_rng(0))
    print("templates  mean cosine  std")
    for ratio, m, mean, std in rows:
        print(f"{m:9d}  {mean:11.4f}  {std:.4f}")

    try:
        analysis.invert_scores(b"\x00" * 128, [0.1] * d)
    except analysis.GalleryUnavailableError as err:
        print(f"\nwith ciphertext templates: {err}")


if __name__ == "__main__":
    main()
