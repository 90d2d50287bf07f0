/**
 * Parameter form state and its bijection onto the job-config subset the
 * service accepts. Validation either yields a config or per-field messages.
 */

export type Variant = "dipa" | "dipa-tv";

export interface JobConfig {
  variant: Variant;
  lambda_tv: number;
  steps: number;
  patch_side: number;
  count: number;
  seed: number;
}

/** Raw form values (always strings except the variant select). */
export interface FormState {
  variant: Variant;
  lambdaTv: string;
  steps: string;
  patchSide: string;
  count: string;
  seed: string;
}

export type FieldErrors = Partial<Record<keyof FormState, string>>;

export type ValidationResult =
  | { ok: true; config: JobConfig }
  | { ok: false; errors: FieldErrors };

export const DEFAULT_FORM: FormState = {
  variant: "dipa",
  lambdaTv: "0",
  steps: "200",
  patchSide: "448",
  count: "5",
  seed: "0",
};

function parseIntField(raw: string, min: number): number | null {
  if (!/^-?\d+$/.test(raw.trim())) return null;
  const value = Number(raw);
  return value >= min ? value : null;
}

function parseFloatField(raw: string, min: number): number | null {
  const value = Number(raw.trim());
  if (raw.trim() === "" || Number.isNaN(value)) return null;
  return value >= min ? value : null;
}

export function validateForm(form: FormState): ValidationResult {
  const errors: FieldErrors = {};
  const lambdaTv = parseFloatField(form.lambdaTv, 0);
  if (lambdaTv === null) errors.lambdaTv = "must be a number ≥ 0";
  const steps = parseIntField(form.steps, 0);
  if (steps === null) errors.steps = "must be an integer ≥ 0";
  const patchSide = parseIntField(form.patchSide, 1);
  if (patchSide === null) errors.patchSide = "must be an integer ≥ 1";
  const count = parseIntField(form.count, 1);
  if (count === null) errors.count = "must be an integer ≥ 1";
  const seed = parseIntField(form.seed, -(2 ** 31));
  if (seed === null) errors.seed = "must be an integer";
  if (form.variant === "dipa" && lambdaTv !== null && lambdaTv !== 0) {
    errors.lambdaTv = "variant dipa requires smoothing weight 0";
  }
  if (Object.keys(errors).length > 0) return { ok: false, errors };
  return {
    ok: true,
    config: {
      variant: form.variant,
      lambda_tv: lambdaTv!,
      steps: steps!,
      patch_side: patchSide!,
      count: count!,
      seed: seed!,
    },
  };
}

/** Inverse of validateForm on valid configs; round-trips exactly. */
export function configToForm(config: JobConfig): FormState {
  return {
    variant: config.variant,
    lambdaTv: String(config.lambda_tv),
    steps: String(config.steps),
    patchSide: String(config.patch_side),
    count: String(config.count),
    seed: String(config.seed),
  };
}
