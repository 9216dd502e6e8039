// Finding spans -> renderable text segments.
//
// Spans come from the server byte-for-byte; no client-side detection.
// Overlapping or unsorted spans are tolerated (first category to claim a
// character wins), out-of-range spans are clamped.

import type { Finding } from './model.js';

export interface Segment {
  text: string;
  category: string | null;
}

export function segmentText(text: string, findings: Finding[]): Segment[] {
  if (text.length === 0) return [];

  // character -> category, first claim wins
  const claims: (string | null)[] = new Array(text.length).fill(null);
  const ordered = [...findings].sort((a, b) => a.span[0] - b.span[0]);
  for (const f of ordered) {
    const lo = Math.max(0, Math.min(text.length, f.span[0]));
    const hi = Math.max(0, Math.min(text.length, f.span[1]));
    for (let i = lo; i < hi; i++) {
      if (claims[i] === null) claims[i] = f.category;
    }
  }

  const segments: Segment[] = [];
  let start = 0;
  for (let i = 1; i <= text.length; i++) {
    if (i === text.length || claims[i] !== claims[start]) {
      segments.push({ text: text.slice(start, i), category: claims[start] ?? null });
      start = i;
    }
  }
  return segments;
}

// Stable CSS class per finding category; unknown categories share a
// fallback so new server-side detectors still render highlighted.
const CATEGORY_CLASSES: Record<string, string> = {
  'Name': 'hl-name',
  'MRN-or-ID': 'hl-id',
  'Address': 'hl-address',
  'Phone': 'hl-phone',
  'Email': 'hl-email',
  'Date': 'hl-date',
  'AgeOver89': 'hl-age',
  'FreeTextHit': 'hl-freetext',
  'DicomIdentityTag': 'hl-dicom',
};

export function categoryClass(category: string): string {
  return CATEGORY_CLASSES[category] ?? 'hl-other';
}
