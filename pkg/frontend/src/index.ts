export { CliError, runCli } from './run.js';
export { BoundSampler, makeSampler, nextIndices } from './sampler.js';
export type { SamplerParams, Strategy } from './sampler.js';
export { calibrate, iterationsPerEpoch } from './budget.js';
export type { CalibrateOptions, CalibratedSchedule, IpeOptions } from './budget.js';
export { evaluate } from './evaluate.js';
export type { EvalReport, EvalRow } from './evaluate.js';
