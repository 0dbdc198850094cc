#!/usr/bin/env python3
"""Independent scalar arithmetic for the two distillation loss examples.

Recomputes, with plain Python floats and no project code:
  * the plain distillation cross-entropy for a single matched row with
    teacher = student = [0.7, 0.3], normalized by R*C = 1*2;
  * the background-aware variant for teacher [bg 0.6, c1 0.4] against
    student [bg 0.3, c1 0.4, new 0.3], where the teacher's background
    mass is matched by the student's background plus new-class mass.

Prints one "name value" line each; the acceptance suite compares these
against the C++ implementation to five decimals.
"""

import math


def plain_kd(teacher, student):
    assert len(teacher) == len(student)
    r, c = 1, len(teacher)
    total = sum(t * math.log(s) for t, s in zip(teacher, student))
    return -total / (r * c)


def unbiased_kd(teacher, student_bg, student_old, student_new):
    # teacher[0] is background; the student's background absorbs the new
    # classes' probability mass.
    r, c = 1, len(teacher)
    grouped_bg = student_bg + sum(student_new)
    total = teacher[0] * math.log(grouped_bg)
    total += sum(t * math.log(s) for t, s in zip(teacher[1:], student_old))
    return -total / (r * c)


def main():
    kd = plain_kd([0.7, 0.3], [0.7, 0.3])
    unkd = unbiased_kd([0.6, 0.4], 0.3, [0.4], [0.3])
    print(f"kd_loss {kd:.17g}")
    print(f"unbiased_kd_box {unkd:.17g}")


if __name__ == "__main__":
    main()
