import { runCli } from './run.js';

export type Strategy = 'random' | 'weighted' | 'episodic';

export interface SamplerParams {
  batchSize?: number;
  classesPerEpisode?: number;
  supportsPerClass?: number;
  queriesPerClass?: number;
  episodesPerEpoch?: number;
  supervisionSource?: 'queries' | 'supports';
}

interface StreamRecord {
  iter: number;
  ids: number[];
}

/**
 * Handle over a native sampler stream.
 *
 * The CLI is one-shot, so the handle materializes the id stream in blocks:
 * when the buffer runs out it re-runs `epibatch sample` for twice as many
 * iterations and keeps the longer stream.  Streams are deterministic in
 * (dataset, config, seed), so the re-run extends the previous draws exactly;
 * amortized cost stays linear per index.  Not safe for concurrent use.
 */
export class BoundSampler {
  private batches: number[][] = [];
  private cursor = 0;

  constructor(
    public readonly datasetPath: string,
    public readonly strategy: Strategy,
    public readonly seed: number,
    public readonly params: SamplerParams = {},
  ) {
    this.fetch(16); // surfaces bad dataset paths and strategies at construction
  }

  private cliArgs(iters: number): string[] {
    const p = this.params;
    const args = [
      'sample',
      '--data', this.datasetPath,
      '--strategy', this.strategy,
      '--seed', String(this.seed),
      '--iters', String(iters),
    ];
    if (p.batchSize !== undefined) args.push('--batch-size', String(p.batchSize));
    if (p.classesPerEpisode !== undefined) args.push('--classes-per-episode', String(p.classesPerEpisode));
    if (p.supportsPerClass !== undefined) args.push('--supports-per-class', String(p.supportsPerClass));
    if (p.queriesPerClass !== undefined) args.push('--queries-per-class', String(p.queriesPerClass));
    if (p.episodesPerEpoch !== undefined) args.push('--episodes-per-epoch', String(p.episodesPerEpoch));
    if (p.supervisionSource !== undefined) args.push('--supervision-source', p.supervisionSource);
    return args;
  }

  private fetch(iters: number): void {
    const out = runCli(this.cliArgs(iters));
    this.batches = out
      .split('\n')
      .filter((line) => line.length > 0)
      .map((line) => (JSON.parse(line) as StreamRecord).ids);
  }

  nextIndices(): number[] {
    if (this.cursor >= this.batches.length) {
      this.fetch(Math.max(16, this.batches.length * 2));
    }
    return this.batches[this.cursor++];
  }
}

export function makeSampler(
  datasetPath: string,
  strategy: Strategy,
  seed = 0,
  params: SamplerParams = {},
): BoundSampler {
  return new BoundSampler(datasetPath, strategy, seed, params);
}

export function nextIndices(handle: BoundSampler): number[] {
  return handle.nextIndices();
}
