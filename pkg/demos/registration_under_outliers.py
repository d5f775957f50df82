"""Least squares versus RANSAC when half of the correspondences are wrong.

A rigid motion is applied to 100 random points, then half the matches are
replaced with random points in the target's bounding box. Kabsch on all
matches is pulled far off; RANSAC recovers the motion and flags the
outliers.
"""

import math

import numpy as np

from rio.geometry import RigidPose, random_rotation, rotation_angle
from rio.registration import RansacConfig, kabsch, ransac


def errors(pose, truth):
    r = math.degrees(rotation_angle(pose.rotation.T @ truth.rotation))
    return r, float(np.linalg.norm(pose.translation - truth.translation))


def main():
    rng = np.random.default_rng(0)
    truth = RigidPose(random_rotation(rng), rng.uniform(-1, 1, 3))
    P = rng.uniform(-0.5, 0.5, (100, 3))
    Q = truth.apply(P)
    Q[50:] = rng.uniform(Q.min(0), Q.max(0), (50, 3))

    r, t = errors(kabsch((P, Q)), truth)
    print(f"kabsch on all matches: rotation error {r:.2f} deg, translation error {t:.3f} m")

    res = ransac((P, Q), RansacConfig(seed=1))
    r, t = errors(res.pose, truth)
    print(f"ransac:                rotation error {r:.2e} deg, translation error {t:.2e} m")
    print(f"inliers kept: {len(res.inliers)}, true inliers among them: "
          f"{int((res.inliers < 50).sum())}")


if __name__ == "__main__":
    main()
