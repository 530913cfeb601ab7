import { runCli } from './run.js';

export interface EvalRow {
  class: number | 'AVERAGE';
  name: string;
  dice: number | null;
  hd95_mm: number | null;
  hd95_undefined_slices: number;
}

export interface EvalReport {
  rows: EvalRow[];
  conventions: { hd95_mode: string; empty_masks: string };
  n_slices: number;
}

/**
 * Per-class dice and HD95 of a prediction tree against a reference dataset.
 * The last row is the foreground average (class "AVERAGE").
 */
export function evaluate(
  predPath: string,
  refPath: string,
  opts: { hd95Mode?: 'union' | 'max' } = {},
): EvalReport {
  const args = ['eval', '--pred', predPath, '--ref', refPath, '--format', 'json'];
  if (opts.hd95Mode !== undefined) args.push('--hd95-mode', opts.hd95Mode);
  return JSON.parse(runCli(args)) as EvalReport;
}
