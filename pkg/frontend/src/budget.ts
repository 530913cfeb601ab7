import { runCli } from './run.js';

export interface IpeOptions {
  trainSize?: number;
  batchSize?: number;
  episodes?: number;
}

/** Optimizer steps per epoch; pass trainSize+batchSize or episodes alone. */
export function iterationsPerEpoch(opts: IpeOptions): number {
  const args = ['ipe'];
  if (opts.trainSize !== undefined) args.push('--train-size', String(opts.trainSize));
  if (opts.batchSize !== undefined) args.push('--batch-size', String(opts.batchSize));
  if (opts.episodes !== undefined) args.push('--episodes', String(opts.episodes));
  const doc = JSON.parse(runCli(args)) as { iterations_per_epoch: number };
  return doc.iterations_per_epoch;
}

export interface CalibrateOptions {
  refIpe: number;
  targetIpe: number;
  milestones?: number[];
  patience?: number;
  maxEpochs?: number;
  baseLr?: number;
  gamma?: number;
}

// field names mirror the CLI JSON verbatim
export interface CalibratedSchedule {
  base_lr: number;
  gamma: number;
  milestone_iters: number[];
  patience_iters: number;
  max_iters: number;
  milestone_epochs: number[];
  patience_epochs: number;
  max_epochs: number;
  iters_per_epoch: number;
  notes: string[];
}

export function calibrate(opts: CalibrateOptions): CalibratedSchedule {
  const args = [
    'calibrate',
    '--ref-ipe', String(opts.refIpe),
    '--target-ipe', String(opts.targetIpe),
  ];
  if (opts.milestones !== undefined) args.push('--milestones', opts.milestones.join(','));
  if (opts.patience !== undefined) args.push('--patience', String(opts.patience));
  if (opts.maxEpochs !== undefined) args.push('--max', String(opts.maxEpochs));
  if (opts.baseLr !== undefined) args.push('--base-lr', String(opts.baseLr));
  if (opts.gamma !== undefined) args.push('--gamma', String(opts.gamma));
  return JSON.parse(runCli(args)) as CalibratedSchedule;
}
