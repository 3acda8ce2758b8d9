#pragma once

#include <string>
#include <vector>

#include "cryobsn/volume.hpp"

namespace cryobsn {

struct PsnrResult {
    double db = 0.0;
    bool capped = false; // MSE was 0; reported as 100 dB
};

// peak <= 0 selects the dynamic range of the reference a.
PsnrResult psnr(const Volume& a, const Volume& b, double peak = 0.0);

// Mean local SSIM over Gaussian-weighted 7^3 windows (sigma 1.5), reflect
// boundary. peak <= 0 selects the dynamic range of the reference a.
double ssim3d(const Volume& a, const Volume& b, int window = 7, double k1 = 0.01, double k2 = 0.03,
              double peak = 0.0);

struct FscCurve {
    std::vector<double> freq;       // shell center, cycles/voxel
    std::vector<double> corr;       // shell correlation
    std::vector<int64_t> counts;    // coefficients per shell
    int dropped_shells = 0;         // empty shells removed
};

FscCurve fsc(const Volume& a, const Volume& b, int n_shells);

struct FscResolution {
    double angstrom = 0.0;
    double f_cross = 0.0;           // cycles/voxel
    bool nyquist_limited = false;   // curve never crossed the threshold
};

FscResolution fsc_resolution(const FscCurve& curve, double spacing, double threshold = 0.5);

// CSV row: dataset, sigma, method, psnr_db, ssim, fsc_res_A
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& dataset, const std::string& sigma,
                            const std::string& method, const PsnrResult& p, double ssim,
                            const FscResolution* fsc_res);

} // namespace cryobsn
