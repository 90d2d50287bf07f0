/**
 * Pixel-exact integer scaling for the fullscreen patch display.
 *
 * The display path never lets the browser resample: we replicate pixels
 * ourselves at an integer factor and paint the result with putImageData
 * into a canvas of exactly the scaled size, so no smoothing can occur.
 */

export interface PixelBuffer {
  width: number;
  height: number;
  /** RGBA, row-major, 4 bytes per pixel (ImageData layout). */
  data: Uint8ClampedArray<ArrayBuffer>;
}

/** Largest integer factor that fits the patch on the screen; never below 1. */
export function integerScaleFactor(
  patchSide: number,
  screenWidth: number,
  screenHeight: number,
): number {
  if (patchSide < 1) throw new Error(`invalid patch side ${patchSide}`);
  const limit = Math.min(screenWidth, screenHeight);
  return Math.max(1, Math.floor(limit / patchSide));
}

/** Nearest-neighbor upscale by an integer factor (pure pixel replication). */
export function scaleNearest(src: PixelBuffer, factor: number): PixelBuffer {
  if (!Number.isInteger(factor) || factor < 1) {
    throw new Error(`scale factor must be a positive integer, got ${factor}`);
  }
  const ow = src.width * factor;
  const oh = src.height * factor;
  const out = new Uint8ClampedArray(ow * oh * 4);
  for (let y = 0; y < oh; y++) {
    const sy = Math.floor(y / factor);
    for (let x = 0; x < ow; x++) {
      const sx = Math.floor(x / factor);
      const si = (sy * src.width + sx) * 4;
      const oi = (y * ow + x) * 4;
      out[oi] = src.data[si];
      out[oi + 1] = src.data[si + 1];
      out[oi + 2] = src.data[si + 2];
      out[oi + 3] = src.data[si + 3];
    }
  }
  return { width: ow, height: oh, data: out };
}
