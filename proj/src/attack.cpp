#include "pyramidat/attack.hpp"

namespace pyramidat {

template AttackResult<float> pgd_pyramid_attack<float>(const ModelParams<float>&,
                                                       const DropRealization&,
                                                       const ImageBatch<float>&,
                                                       const PyramidSpec&, std::uint64_t, int,
                                                       MaskRecorder*);
template AttackResult<double> pgd_pyramid_attack<double>(const ModelParams<double>&,
                                                         const DropRealization&,
                                                         const ImageBatch<double>&,
                                                         const PyramidSpec&, std::uint64_t,
                                                         int, MaskRecorder*);
template AttackResult<float> pgd_pixel_attack<float>(const ModelParams<float>&,
                                                     const DropRealization&,
                                                     const ImageBatch<float>&,
                                                     const PixelSpec&, std::uint64_t, int,
                                                     MaskRecorder*);
template AttackResult<double> pgd_pixel_attack<double>(const ModelParams<double>&,
                                                       const DropRealization&,
                                                       const ImageBatch<double>&,
                                                       const PixelSpec&, std::uint64_t, int,
                                                       MaskRecorder*);

}  // namespace pyramidat
